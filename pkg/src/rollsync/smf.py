"""Low-level Standard MIDI File reading and writing.

Reads format 0/1 files into flat event lists with absolute tick times and a
tempo map; writes single-track format 0 files at a fixed resolution. Only the
events needed upstream (note on/off, tempo) are materialized, everything else
is skipped with correct byte accounting.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

PPQ = 480                  # ticks per quarter note on the write side
DEFAULT_TEMPO = 500_000    # microseconds per quarter note (120 BPM)


class MidiParseError(Exception):
    """Malformed MIDI data; `offset` is the absolute byte offset in the file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class NoteEvent:
    tick: int
    kind: str        # "on" | "off"
    channel: int
    pitch: int
    velocity: int
    track: int


@dataclass
class SmfData:
    division: int
    note_events: list[NoteEvent] = field(default_factory=list)
    tempo_events: list[tuple[int, int]] = field(default_factory=list)  # (tick, us/quarter)

    def tick_to_seconds(self, tick: int) -> float:
        """Convert an absolute tick to seconds honoring all tempo changes."""
        tempos = sorted(self.tempo_events)
        if not tempos or tempos[0][0] > 0:
            tempos.insert(0, (0, DEFAULT_TEMPO))
        seconds = 0.0
        for (t0, us), nxt in zip(tempos, tempos[1:] + [(None, None)]):
            t1 = tick if nxt[0] is None else min(tick, nxt[0])
            if t1 > t0:
                seconds += (t1 - t0) * us / 1e6 / self.division
            if nxt[0] is None or tick <= nxt[0]:
                break
        return seconds


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def need(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise MidiParseError(f"truncated {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def byte(self, what: str = "byte") -> int:
        return self.need(1, what)[0]

    def varint(self) -> int:
        value = 0
        for _ in range(4):
            b = self.byte("variable-length quantity")
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise MidiParseError("variable-length quantity longer than 4 bytes", self.pos)


def read_smf(path) -> SmfData:
    """Parse a format 0/1 SMF into note and tempo events with absolute ticks."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)

    header = r.need(8, "header chunk")
    if header[:4] != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    header_len = struct.unpack(">I", header[4:])[0]
    if header_len < 6:
        raise MidiParseError("MThd chunk too short", 4)
    fmt, ntracks, division = struct.unpack(">HHH", r.need(6, "header fields"))
    r.need(header_len - 6, "header padding")
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division is not supported", 12)
    if division == 0:
        raise MidiParseError("zero ticks-per-quarter division", 12)

    smf = SmfData(division=division)
    for track in range(ntracks):
        chunk_head = r.need(8, "track chunk header")
        if chunk_head[:4] != b"MTrk":
            raise MidiParseError("expected MTrk chunk", r.pos - 8)
        length = struct.unpack(">I", chunk_head[4:])[0]
        end = r.pos + length
        if end > len(data):
            raise MidiParseError("track length exceeds file size", r.pos - 4)
        _read_track(r, end, track, smf)
        r.pos = end
    return smf


def _read_track(r: _Reader, end: int, track: int, smf: SmfData) -> None:
    tick = 0
    status = 0
    while r.pos < end:
        tick += r.varint()
        b = r.byte("event status")
        if b < 0x80:
            # running status: data byte of the previous channel message
            if status < 0x80:
                raise MidiParseError("data byte without running status", r.pos - 1)
            r.pos -= 1
        else:
            status = b

        if status == 0xFF:
            meta_type = r.byte("meta type")
            length = r.varint()
            payload = r.need(length, "meta payload")
            if meta_type == 0x51:
                if length != 3:
                    raise MidiParseError("tempo meta event must be 3 bytes", r.pos - length)
                smf.tempo_events.append((tick, int.from_bytes(payload, "big")))
            status = 0  # meta/sysex cancel running status
        elif status in (0xF0, 0xF7):
            r.need(r.varint(), "sysex payload")
            status = 0
        elif 0x80 <= status <= 0xEF:
            kind = status & 0xF0
            channel = status & 0x0F
            d1 = r.byte("event data")
            d2 = r.byte("event data") if kind not in (0xC0, 0xD0) else 0
            if kind == 0x90 and d2 > 0:
                smf.note_events.append(NoteEvent(tick, "on", channel, d1, d2, track))
            elif kind == 0x80 or (kind == 0x90 and d2 == 0):
                smf.note_events.append(NoteEvent(tick, "off", channel, d1, d2, track))
        else:
            raise MidiParseError(f"unexpected status byte 0x{status:02X}", r.pos - 1)


def _encode_varint(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def write_smf(path, notes: list[tuple[int, int, int, int]]) -> None:
    """Write (onset_tick, offset_tick, pitch, velocity) notes as a format 0 file.

    Fixed 480 PPQ at 120 BPM; note-offs are emitted before note-ons at equal
    ticks so zero-gap repetitions re-parse unambiguously.
    """
    events = []  # (tick, order, status, d1, d2)
    for on_tick, off_tick, pitch, velocity in notes:
        events.append((on_tick, 1, 0x90, pitch, velocity))
        events.append((off_tick, 0, 0x80, pitch, 0))
    events.sort(key=lambda e: (e[0], e[1], e[3]))

    body = bytearray()
    body += _encode_varint(0) + bytes([0xFF, 0x51, 0x03]) + DEFAULT_TEMPO.to_bytes(3, "big")
    last_tick = 0
    for tick, _, status, d1, d2 in events:
        body += _encode_varint(tick - last_tick) + bytes([status, d1, d2])
        last_tick = tick
    body += _encode_varint(0) + bytes([0xFF, 0x2F, 0x00])

    with open(path, "wb") as fh:
        fh.write(b"MThd" + struct.pack(">IHHH", 6, 0, 1, PPQ))
        fh.write(b"MTrk" + struct.pack(">I", len(body)) + bytes(body))
