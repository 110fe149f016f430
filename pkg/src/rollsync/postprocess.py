"""Turn activation maps back into note sequences.

The activation map is thresholded into per-pitch blocks; blocks are matched
to the input notes per pitch in temporal order; matched notes adopt block
times while unmatched notes keep their original times, so the output always
contains exactly the input's notes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .symbolic import NUM_PITCHES, PITCH_MIN, Note, NoteSequence


@dataclass(frozen=True)
class NoteBlock:
    pitch: int
    start_frame: int
    end_frame: int  # half-open
    fps: float

    def __post_init__(self):
        if self.end_frame <= self.start_frame:
            raise ValueError("block must span at least one frame")

    @property
    def start_time(self) -> float:
        return self.start_frame / self.fps

    @property
    def end_time(self) -> float:
        return self.end_frame / self.fps


def threshold_and_segment(act: np.ndarray, fps: float,
                          threshold: float = 0.5) -> list[NoteBlock]:
    """Binarize at >= threshold and list maximal active runs per pitch."""
    act = np.asarray(act)
    if act.ndim != 2 or act.shape[1] != NUM_PITCHES:
        raise ValueError(f"activation map must be N x {NUM_PITCHES}")
    active = np.pad(act >= threshold, ((1, 1), (0, 0)))
    blocks = []
    for col in range(NUM_PITCHES):
        edges = np.flatnonzero(np.diff(active[:, col].astype(np.int8)))
        for start, end in zip(edges[::2], edges[1::2]):
            blocks.append(NoteBlock(PITCH_MIN + col, int(start), int(end), fps))
    return blocks


def _ordered_assignment(costs: np.ndarray) -> list[int]:
    """Match every column to a distinct row, order preserved, min total cost.

    costs is (n, m) with n >= m; returns, per column j, the matched row.
    """
    n, m = costs.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[:, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, min(i, m) + 1):
            skip = acc[i - 1, j]
            match = acc[i - 1, j - 1] + costs[i - 1, j - 1]
            acc[i, j] = match if match <= skip else skip
    rows = [0] * m
    i, j = n, m
    while j > 0:
        if acc[i - 1, j - 1] + costs[i - 1, j - 1] <= acc[i - 1, j]:
            rows[j - 1] = i - 1
            j -= 1
        i -= 1
    return rows


def match_notes(blocks: list[NoteBlock], input_seq: NoteSequence,
                max_distance: float | None = None) -> dict[str, NoteBlock | None]:
    """Pair input notes with blocks of the same pitch in temporal order.

    Equal counts pair k-th with k-th; unequal counts keep order but choose
    the pairing minimizing total |input onset - block start|. Every input id
    appears in the result; surplus blocks are dropped. With max_distance,
    pairs farther apart than that many seconds are dropped to None as well,
    so downstream updates leave those notes untouched.
    """
    by_pitch_blocks: dict[int, list[NoteBlock]] = {}
    for block in sorted(blocks, key=lambda b: (b.pitch, b.start_frame)):
        by_pitch_blocks.setdefault(block.pitch, []).append(block)
    mapping: dict[str, NoteBlock | None] = {note.id: None for note in input_seq}
    by_pitch_notes: dict[int, list[Note]] = {}
    for note in input_seq:  # already onset-sorted
        by_pitch_notes.setdefault(note.pitch, []).append(note)

    for pitch, notes in by_pitch_notes.items():
        pitch_blocks = by_pitch_blocks.get(pitch, [])
        if not pitch_blocks:
            continue
        if len(notes) == len(pitch_blocks):
            for note, block in zip(notes, pitch_blocks):
                mapping[note.id] = block
            continue
        onsets = np.array([note.onset for note in notes])
        starts = np.array([b.start_time for b in pitch_blocks])
        costs = np.abs(onsets[:, None] - starts[None, :])
        if len(notes) >= len(pitch_blocks):
            for j, i in enumerate(_ordered_assignment(costs)):
                mapping[notes[i].id] = pitch_blocks[j]
        else:
            for j, i in enumerate(_ordered_assignment(costs.T)):
                mapping[notes[j].id] = pitch_blocks[i]
    if max_distance is not None:
        for note in input_seq:
            block = mapping[note.id]
            if block is not None and abs(block.start_time - note.onset) > max_distance:
                mapping[note.id] = None
    return mapping


def update_sequence(input_seq: NoteSequence,
                    mapping: dict[str, NoteBlock | None]) -> NoteSequence:
    """Adopt matched block times; unmatched notes pass through unchanged."""
    notes = []
    for note in input_seq:
        block = mapping.get(note.id)
        if block is None:
            notes.append(note)
        else:
            notes.append(replace(note, onset=block.start_time,
                                 offset=block.end_time))
    duration = max(input_seq.duration, max((n.offset for n in notes), default=0.0))
    return NoteSequence(tuple(notes), duration)
