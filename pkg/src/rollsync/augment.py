"""Synthetic misalignment: timing jitter, tempo scaling, dataset assembly.

Timing shifts are amplitude-modulated uniform draws: an independent uniform
direction in [-1, 1] times an independent uniform amplitude in [0, max_dev]
per note boundary. The shift magnitude never exceeds max_dev, and a sizable
fraction of notes move only slightly, mimicking how real performances mix
near-perfect and sloppy onsets.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import AudioBuffer, save_wav
from .symbolic import NoteSequence, parse_midi, segment_at_silence, write_midi

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "valid", "test")


@dataclass
class AugmentConfig:
    max_dev: float = 0.100
    max_tempo_factor: float = 0.0
    seed: int = 0
    min_duration: float = 0.010

    def __post_init__(self):
        if not 0.0 <= self.max_dev <= 0.5:
            raise ValueError(f"max_dev {self.max_dev} outside [0, 0.5]")
        if not 0.0 <= self.max_tempo_factor < 1.0:
            raise ValueError(f"max_tempo_factor {self.max_tempo_factor} outside [0, 1)")
        if self.min_duration <= 0:
            raise ValueError("min_duration must be positive")


@dataclass
class DatasetTriplet:
    """One training example: audio plus aligned and artificially unaligned MIDI.

    `note_id_map` maps ids of the unaligned file (as parse_midi labels them)
    to ids of the aligned file, making correspondence exact even when jitter
    reorders same-pitch notes.
    """

    piece: str
    segment: int
    group: str
    audio: str
    aligned_midi: str
    unaligned_midi: str
    split: str | None
    seed: int
    max_dev: float
    tempo_factor: float
    time_range: tuple[float, float]
    note_id_map: dict[str, str] = field(default_factory=dict)


def perturb_timing(seq: NoteSequence, cfg: AugmentConfig,
                   rng: np.random.Generator) -> NoteSequence:
    """Shift every onset and offset independently by at most max_dev seconds.

    Onsets are clamped at zero and durations floored at min_duration. No
    monotonicity across notes is enforced, so the misalignment need not follow
    a warping path. max_dev = 0 is the identity.
    """
    if cfg.max_dev == 0 or not len(seq):
        return NoteSequence(seq.notes, seq.duration)
    n = len(seq.notes)
    shifts = rng.uniform(-1.0, 1.0, (n, 2)) * rng.uniform(0.0, cfg.max_dev, (n, 2))
    notes = []
    for note, (d_on, d_off) in zip(seq.notes, shifts):
        onset = max(0.0, note.onset + d_on)
        offset = note.offset + d_off
        if offset - onset < cfg.min_duration:
            offset = onset + cfg.min_duration
        notes.append(replace(note, onset=onset, offset=offset))
    duration = max(seq.duration, max(n.offset for n in notes))
    return NoteSequence(tuple(notes), duration)


def scale_tempo(seq: NoteSequence, factor: float) -> NoteSequence:
    """Multiply all note times (and the duration) by a positive factor."""
    if factor <= 0:
        raise ValueError(f"tempo factor must be positive, got {factor}")
    notes = tuple(
        replace(n, onset=n.onset * factor, offset=n.offset * factor) for n in seq
    )
    return NoteSequence(notes, seq.duration * factor)


def _rank_map(reference: NoteSequence, relabeled: NoteSequence) -> dict[str, str]:
    """Map reference ids to relabeled ids by per-pitch onset rank.

    Valid whenever `relabeled` is `reference` after write/parse round-trip:
    tick quantization is monotone per pitch, so per-pitch rank is preserved.
    """
    assert len(reference) == len(relabeled)
    by_pitch_ref: dict[int, list[str]] = {}
    for note in reference:
        by_pitch_ref.setdefault(note.pitch, []).append(note.id)
    by_pitch_new: dict[int, list[str]] = {}
    for note in relabeled:
        by_pitch_new.setdefault(note.pitch, []).append(note.id)
    mapping = {}
    for pitch, ref_ids in by_pitch_ref.items():
        for ref_id, new_id in zip(ref_ids, by_pitch_new[pitch]):
            mapping[ref_id] = new_id
    return mapping


def _segment_rng(seed: int, piece_index: int, segment_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(piece_index, segment_index))
    return np.random.default_rng(ss)


def build_dataset(pieces: list[tuple[str, AudioBuffer, NoteSequence]],
                  cfg: AugmentConfig, out_dir,
                  target_len: float = 30.0) -> list[DatasetTriplet]:
    """Segment pieces at silence and emit (audio, aligned, unaligned) triplets.

    Deterministic for a fixed cfg.seed: each (piece, segment) owns its own
    seeded generator, so results do not depend on processing order. Per-piece
    I/O failures are logged and skipped without aborting the batch. Writes
    MANIFEST_NAME into out_dir.
    """
    if not pieces:
        raise ValueError("no input pieces")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    triplets = []
    for piece_index, (name, audio, seq) in enumerate(pieces):
        try:
            triplets.extend(_build_piece(piece_index, name, audio, seq, cfg,
                                         out_dir, target_len))
        except OSError as exc:
            logger.error("skipping piece %s: %s", name, exc)
    save_manifest(triplets, out_dir)
    return triplets


def _build_piece(piece_index, name, audio, seq, cfg, out_dir, target_len):
    group = name.split("/")[0] if "/" in name else name
    stem_base = name.replace("/", "_")
    sr = audio.sample_rate
    out = []
    for seg_index, (seg_seq, (start, end)) in enumerate(
            segment_at_silence(seq, audio.duration, target_len)):
        rng = _segment_rng(cfg.seed, piece_index, seg_index)
        perturbed = perturb_timing(seg_seq, cfg, rng)
        factor = 1.0
        if cfg.max_tempo_factor > 0:
            factor = float(rng.uniform(1.0 - cfg.max_tempo_factor,
                                       1.0 + cfg.max_tempo_factor))
            perturbed = scale_tempo(perturbed, factor)

        stem = f"{stem_base}_seg{seg_index:03d}"
        audio_path = out_dir / f"{stem}.wav"
        aligned_path = out_dir / f"{stem}.aligned.mid"
        unaligned_path = out_dir / f"{stem}.unaligned.mid"
        clip = audio.samples[int(round(start * sr)):int(round(end * sr))]
        save_wav(AudioBuffer(clip, sr), audio_path)
        write_midi(seg_seq, aligned_path)
        write_midi(perturbed, unaligned_path)

        # correspondence between the two files' parse-assigned ids
        to_aligned_file = _rank_map(seg_seq, parse_midi(aligned_path))
        to_unaligned_file = _rank_map(perturbed, parse_midi(unaligned_path))
        id_map = {to_unaligned_file[i]: to_aligned_file[i] for i in to_aligned_file}

        out.append(DatasetTriplet(
            piece=name, segment=seg_index, group=group,
            audio=str(audio_path), aligned_midi=str(aligned_path),
            unaligned_midi=str(unaligned_path), split=None,
            seed=cfg.seed, max_dev=cfg.max_dev, tempo_factor=factor,
            time_range=(start, end), note_id_map=id_map,
        ))
    return out


def split_dataset(triplets: list[DatasetTriplet],
                  scheme: dict[str, str]) -> list[DatasetTriplet]:
    """Assign a split per triplet from its group tag; groups never straddle."""
    out = []
    for t in triplets:
        if t.group not in scheme:
            raise ValueError(f"group {t.group!r} has no split assignment")
        split = scheme[t.group]
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}")
        out.append(replace(t, split=split))
    return out


def fraction_scheme(groups: list[str], fractions: dict[str, float],
                    seed: int = 0) -> dict[str, str]:
    """Randomly assign whole groups to splits with roughly the given fractions.

    Every split with a positive fraction receives at least one group when
    enough groups exist, so tiny datasets still yield usable splits.
    """
    rng = np.random.default_rng(seed)
    order = list(dict.fromkeys(groups))
    rng.shuffle(order)
    n = len(order)
    counts = {s: int(round(fractions.get(s, 0.0) * n)) for s in SPLITS}
    counts["train"] += n - sum(counts.values())  # leftovers go to train
    wanted = [s for s in SPLITS if fractions.get(s, 0.0) > 0 or s == "train"]
    while len(wanted) <= n and any(counts[s] == 0 for s in wanted):
        needy = next(s for s in wanted if counts[s] == 0)
        donor = max(wanted, key=lambda s: counts[s])
        counts[donor] -= 1
        counts[needy] += 1
    scheme = {}
    cursor = 0
    for split in SPLITS:
        for g in order[cursor:cursor + counts[split]]:
            scheme[g] = split
        cursor += counts[split]
    return scheme


def save_manifest(triplets: list[DatasetTriplet], out_dir) -> Path:
    """Write the manifest as a JSON array with paths relative to out_dir."""
    out_dir = Path(out_dir)
    items = []
    for t in triplets:
        item = asdict(t)
        for key in ("audio", "aligned_midi", "unaligned_midi"):
            item[key] = str(Path(item[key]).relative_to(out_dir))
        item["time_range"] = list(t.time_range)
        items.append(item)
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(items, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> list[DatasetTriplet]:
    """Read a manifest, resolving stored paths against its directory."""
    path = Path(path)
    root = path.parent
    triplets = []
    for item in json.loads(path.read_text()):
        triplets.append(DatasetTriplet(
            piece=item["piece"], segment=item["segment"], group=item["group"],
            audio=str(root / item["audio"]),
            aligned_midi=str(root / item["aligned_midi"]),
            unaligned_midi=str(root / item["unaligned_midi"]),
            split=item["split"], seed=item["seed"], max_dev=item["max_dev"],
            tempo_factor=item["tempo_factor"],
            time_range=tuple(item["time_range"]),
            note_id_map=item.get("note_id_map", {}),
        ))
    return triplets
