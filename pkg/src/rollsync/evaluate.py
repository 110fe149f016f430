"""Onset-error statistics and tolerance-window accuracy.

Correspondence is by note id. Reference notes with no counterpart in the
estimate count as infinitely wrong: they drag accuracy down in every
tolerance window but are left out of the mean/median/std, which summarize
the finite errors only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .symbolic import NoteSequence

TOLERANCES = (0.010, 0.025, 0.050, 0.100)


@dataclass
class AlignmentReport:
    per_note_errors: list
    mean: float
    median: float
    std: float
    accuracy: dict = field(default_factory=dict)


def onset_errors(est: NoteSequence, ref: NoteSequence,
                 id_map: dict[str, str] | None = None) -> list[tuple[str, float]]:
    """Per reference note, |estimated onset - reference onset| in seconds.

    id_map optionally translates estimate ids to reference ids (used when the
    two sequences come from separately written files). Reference notes absent
    from the estimate get an infinite error. Offsets are ignored.
    """
    est_onsets = {}
    for note in est:
        key = id_map.get(note.id, note.id) if id_map else note.id
        est_onsets[key] = note.onset
    errors = []
    shared = 0
    for note in ref:
        if note.id in est_onsets:
            errors.append((note.id, abs(est_onsets[note.id] - note.onset)))
            shared += 1
        else:
            errors.append((note.id, math.inf))
    if shared == 0:
        raise ValueError("estimate and reference share no note ids")
    return errors


def match_by_pitch_and_time(est: NoteSequence, ref: NoteSequence,
                            window: float = 0.050) -> dict[str, str]:
    """Fallback id correspondence for files without tracked identities.

    Per pitch, reference notes in onset order greedily claim the nearest
    still-unclaimed estimate note within the window.
    """
    by_pitch: dict[int, list] = {}
    for note in est:
        by_pitch.setdefault(note.pitch, []).append(note)
    id_map: dict[str, str] = {}
    for ref_note in ref:
        candidates = by_pitch.get(ref_note.pitch, [])
        best = None
        for cand in candidates:
            dist = abs(cand.onset - ref_note.onset)
            if dist <= window and (best is None or dist < abs(best.onset - ref_note.onset)):
                best = cand
        if best is not None:
            candidates.remove(best)
            id_map[best.id] = ref_note.id
    return id_map


def accuracy_report(errors: list[tuple[str, float]]) -> AlignmentReport:
    """Summarize errors: pooled statistics plus per-tolerance accuracy.

    Accuracy counts e <= tolerance over all errors (infinite ones included in
    the denominator); mean/median/std cover the finite errors, population
    convention for std.
    """
    if not errors:
        raise ValueError("cannot summarize an empty error list")
    values = np.array([e for _, e in errors])
    finite = values[np.isfinite(values)]
    if len(finite):
        mean, median, std = (float(finite.mean()), float(np.median(finite)),
                             float(finite.std()))
    else:
        mean = median = std = math.inf
    accuracy = {tol: 100.0 * float((values <= tol).sum()) / len(values)
                for tol in TOLERANCES}
    return AlignmentReport(list(errors), mean, median, std, accuracy)


def report_to_dict(report: AlignmentReport) -> dict:
    """JSON-safe form; infinite errors become null."""
    def safe(x):
        return x if math.isfinite(x) else None

    return {
        "mean": safe(report.mean),
        "median": safe(report.median),
        "std": safe(report.std),
        "accuracy": {f"{tol:.3f}": report.accuracy[tol] for tol in sorted(report.accuracy)},
        "per_note_errors": [[note_id, safe(err)] for note_id, err in report.per_note_errors],
    }


def report_from_dict(data: dict) -> AlignmentReport:
    def unsafe(x):
        return math.inf if x is None else x

    return AlignmentReport(
        [(note_id, unsafe(err)) for note_id, err in data["per_note_errors"]],
        unsafe(data["mean"]), unsafe(data["median"]), unsafe(data["std"]),
        {float(tol): acc for tol, acc in data["accuracy"].items()},
    )


def compare_methods(reports: list[tuple[str, AlignmentReport]]) -> list[dict]:
    """One row per method: mean/median/std in ms plus the accuracy columns."""
    if not reports:
        raise ValueError("need at least one report to compare")
    rows = []
    for name, report in reports:
        row = {"method": name,
               "mean_ms": report.mean * 1000.0,
               "median_ms": report.median * 1000.0,
               "std_ms": report.std * 1000.0}
        for tol in sorted(report.accuracy, reverse=True):
            row[f"acc_{round(tol * 1000)}ms"] = report.accuracy[tol]
        rows.append(row)
    return rows


def write_comparison_csv(rows: list[dict], path) -> None:
    """Two-decimal CSV mirroring the usual mean/median/std/accuracy table."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = list(rows[0])
        writer.writerow(header)
        for row in rows:
            writer.writerow([row["method"]] +
                            [f"{row[col]:.2f}" for col in header[1:]])
    return None
