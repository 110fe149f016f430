"""Symbolic note data: parsing, piano rolls, segmentation, serialization.

Notes carry stable string ids so that correspondence survives augmentation and
alignment; every transform in this package preserves them.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from . import smf

logger = logging.getLogger(__name__)

PITCH_MIN = 21
PITCH_MAX = 108
NUM_PITCHES = PITCH_MAX - PITCH_MIN + 1
VALID_FPS = (25, 50, 100, 200)

# write-side tick rate: 480 PPQ at 120 BPM
_TICKS_PER_SECOND = smf.PPQ * 1e6 / smf.DEFAULT_TEMPO


@dataclass(frozen=True)
class Note:
    """One note event; `id` is unique within its sequence."""

    id: str
    pitch: int
    onset: float
    offset: float
    velocity: int = 64

    def __post_init__(self):
        if not PITCH_MIN <= self.pitch <= PITCH_MAX:
            raise ValueError(f"pitch {self.pitch} outside {PITCH_MIN}..{PITCH_MAX}")
        if self.onset < 0:
            raise ValueError(f"negative onset {self.onset}")
        if self.offset <= self.onset:
            raise ValueError(f"offset {self.offset} not after onset {self.onset}")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} outside 1..127")


@dataclass
class NoteSequence:
    """Notes sorted by (onset, pitch) plus a timeline duration ≥ every offset."""

    notes: tuple[Note, ...]
    duration: float = None  # type: ignore[assignment]

    def __post_init__(self):
        notes = tuple(sorted(self.notes, key=lambda n: (n.onset, n.pitch, n.offset, n.id)))
        object.__setattr__(self, "notes", notes)
        ids = [n.id for n in notes]
        if len(set(ids)) != len(ids):
            raise ValueError("note ids are not unique")
        max_offset = max((n.offset for n in notes), default=0.0)
        if self.duration is None:
            object.__setattr__(self, "duration", max_offset)
        elif self.duration + 1e-9 < max_offset:
            raise ValueError(f"duration {self.duration} shorter than last offset {max_offset}")

    def __len__(self):
        return len(self.notes)

    def __iter__(self):
        return iter(self.notes)

    @classmethod
    def from_values(cls, values, duration: float | None = None) -> "NoteSequence":
        """Build from (pitch, onset, offset[, velocity]) tuples, assigning ids."""
        rows = sorted(values, key=lambda v: (v[1], v[0]))
        notes = [
            Note(f"n{i}", int(v[0]), float(v[1]), float(v[2]),
                 int(v[3]) if len(v) > 3 else 64)
            for i, v in enumerate(rows)
        ]
        return cls(tuple(notes), duration)


@dataclass
class PianoRoll:
    """Binary frame-by-pitch matrix; column c holds MIDI pitch c + 21."""

    frames: np.ndarray
    fps: int

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != NUM_PITCHES:
            raise ValueError(f"piano roll must be N x {NUM_PITCHES}, got {self.frames.shape}")


def time_to_frame(t: float, fps: int) -> int:
    """Half-up rounding of a time in seconds to a frame index."""
    return int(math.floor(t * fps + 0.5))


def num_frames(duration: float, fps: int) -> int:
    # tiny slack absorbs float noise in duration * fps just above an integer
    return max(0, int(math.ceil(duration * fps - 1e-9)))


def to_piano_roll(seq: NoteSequence, fps: int = 100) -> PianoRoll:
    """Rasterize a sequence to a binary roll with one-frame gaps at repetitions.

    A note occupies frames [round(onset*fps), round(offset*fps)), at least one
    frame. When the frame before a note's onset is active because of an earlier
    same-pitch note, that frame is cleared so both onsets stay separable;
    onset frames themselves are never cleared.
    """
    if fps not in VALID_FPS:
        raise ValueError(f"fps must be one of {VALID_FPS}, got {fps}")
    n = num_frames(seq.duration, fps)
    if len(seq):
        n = max(n, 1)
    roll = np.zeros((n, NUM_PITCHES), dtype=np.uint8)
    spans = []  # (r0, r1, col, onset)
    for note in seq:
        col = note.pitch - PITCH_MIN
        r0 = min(time_to_frame(note.onset, fps), n - 1)
        r1 = min(max(time_to_frame(note.offset, fps), r0 + 1), n)
        r1 = max(r1, r0 + 1)
        roll[r0:r1, col] = 1
        spans.append((r0, r1, col, note.onset))

    onset_frames = {(r0, col) for r0, _, col, _ in spans}
    for r0, _, col, onset in spans:
        if r0 == 0 or not roll[r0 - 1, col] or (r0 - 1, col) in onset_frames:
            continue
        covered_by_earlier = any(
            o < onset and s0 <= r0 - 1 < s1
            for s0, s1, c, o in spans if c == col
        )
        if covered_by_earlier:
            roll[r0 - 1, col] = 0
    return PianoRoll(roll, fps)


def _silent_gaps(seq: NoteSequence, end: float) -> list[tuple[float, float]]:
    """Maximal intervals within [0, end] where no note is sounding."""
    intervals = sorted((n.onset, min(n.offset, end)) for n in seq if n.onset < end)
    gaps = []
    cursor = 0.0
    for on, off in intervals:
        if on > cursor:
            gaps.append((cursor, on))
        cursor = max(cursor, off)
    if cursor < end:
        gaps.append((cursor, end))
    return gaps


def segment_at_silence(seq: NoteSequence, audio_len: float,
                       target_len: float = 30.0) -> list[tuple[NoteSequence, tuple[float, float]]]:
    """Split a piece into roughly target_len parts, cutting only in silence.

    Cut points are chosen nearest the ideal position within +/- half a target
    length; when no silence falls in that window the segment extends to the
    next silent instant (or the end). Segments tile [0, audio_len] exactly and
    note times are re-based to each segment's start.
    """
    if target_len <= 0:
        raise ValueError("target_len must be positive")
    gaps = _silent_gaps(seq, audio_len)
    cuts = []
    cur = 0.0
    while audio_len - cur > 1.5 * target_len:
        ideal = cur + target_len
        lo, hi = cur + 0.5 * target_len, cur + 1.5 * target_len
        best = None
        for gs, ge in gaps:
            g_lo, g_hi = max(gs, lo), min(ge, hi)
            if g_lo > g_hi:
                continue
            cand = min(max(ideal, g_lo), g_hi)
            if best is None or abs(cand - ideal) < abs(best - ideal):
                best = cand
        if best is None:
            later = [gs for gs, ge in gaps if ge > hi]
            if not later:
                break
            best = max(later[0], hi)
        cuts.append(best)
        cur = best

    bounds = [0.0] + cuts + [audio_len]
    segments = []
    for start, end in zip(bounds, bounds[1:]):
        notes = [
            replace(n, onset=n.onset - start, offset=min(n.offset, end) - start)
            for n in seq if start <= n.onset < end
        ]
        segments.append((NoteSequence(tuple(notes), end - start), (start, end)))
    return segments


def parse_midi(path) -> NoteSequence:
    """Read an SMF format 0/1 file into a NoteSequence.

    Note-on velocity 0 counts as note-off; on/off events pair first-in
    first-out per (track, channel, pitch). Notes outside the 88-key range are
    dropped with a logged warning count.
    """
    data = smf.read_smf(path)
    pending: dict[tuple[int, int, int], deque] = {}
    raw = []  # (on_tick, off_tick, pitch, velocity)
    for ev in data.note_events:
        key = (ev.track, ev.channel, ev.pitch)
        if ev.kind == "on":
            pending.setdefault(key, deque()).append((ev.tick, ev.velocity))
        else:
            stack = pending.get(key)
            if stack:
                on_tick, velocity = stack.popleft()
                raw.append((on_tick, ev.tick, ev.pitch, velocity))
    # note-ons that never got an off: close at the last event time
    if any(pending.values()):
        end_tick = max(ev.tick for ev in data.note_events)
        for (_, _, pitch), stack in pending.items():
            for on_tick, velocity in stack:
                if end_tick > on_tick:
                    raw.append((on_tick, end_tick, pitch, velocity))

    dropped = sum(1 for _, _, pitch, _ in raw if not PITCH_MIN <= pitch <= PITCH_MAX)
    if dropped:
        logger.warning("dropped %d notes outside pitch range %d..%d",
                       dropped, PITCH_MIN, PITCH_MAX)

    values = []
    for on_tick, off_tick, pitch, velocity in raw:
        if not PITCH_MIN <= pitch <= PITCH_MAX:
            continue
        onset = data.tick_to_seconds(on_tick)
        offset = data.tick_to_seconds(off_tick)
        if offset <= onset:
            offset = onset + 1e-3
        values.append((pitch, onset, offset, max(1, velocity)))
    return NoteSequence.from_values(values)


def write_midi(seq: NoteSequence, path) -> None:
    """Serialize as format 0 at 480 PPQ, 120 BPM; quantization is one tick."""
    rows = []
    for note in seq:
        on_tick = int(round(note.onset * _TICKS_PER_SECOND))
        off_tick = int(round(note.offset * _TICKS_PER_SECOND))
        if off_tick <= on_tick:
            off_tick = on_tick + 1
        rows.append((on_tick, off_tick, note.pitch, note.velocity))
    smf.write_smf(path, rows)


def random_piece(rng: np.random.Generator, duration: float = 10.0,
                 pitch_low: int = 36, pitch_high: int = 96,
                 chord_prob: float = 0.25, rest_prob: float = 0.12) -> NoteSequence:
    """Generate a plausible random piano passage for desk-scale experiments.

    Random-walk melody with occasional chords and rests; rests guarantee
    silent instants for segmentation. Deterministic given the generator state.
    """
    values = []
    t = 0.2
    pitch = int(rng.integers(pitch_low + 12, pitch_high - 12))
    while t < duration - 0.6:
        step = int(rng.integers(-7, 8))
        pitch = int(np.clip(pitch + step, pitch_low, pitch_high))
        length = float(rng.uniform(0.12, 0.55))
        length = min(length, duration - t - 0.05)
        velocity = int(rng.integers(40, 101))
        values.append((pitch, t, t + length, velocity))
        if rng.random() < chord_prob:
            for interval in (4, 7):
                extra = pitch + interval
                if extra <= pitch_high:
                    values.append((extra, t, t + length, velocity))
        gap = float(rng.uniform(0.08, 0.35))
        if rng.random() < rest_prob:
            gap += float(rng.uniform(0.3, 0.8))
        t += max(gap, length * float(rng.uniform(0.6, 1.1)))
    return NoteSequence.from_values(values, duration)
