import dataclasses
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rollsync.evaluate import (
    TOLERANCES,
    accuracy_report,
    compare_methods,
    match_by_pitch_and_time,
    onset_errors,
    report_from_dict,
    report_to_dict,
    write_comparison_csv,
)
from rollsync.symbolic import NoteSequence


def seq(rows):
    """rows: (pitch, onset, offset) triples; ids assigned n0, n1, ..."""
    return NoteSequence.from_values(rows)


def test_onset_errors_absolute_differences():
    ref = seq([(60, 1.0, 1.5), (64, 2.0, 2.5)])
    est = seq([(60, 1.02, 1.5), (64, 1.97, 2.5)])
    errors = dict(onset_errors(est, ref))
    assert errors["n0"] == pytest.approx(0.02)
    assert errors["n1"] == pytest.approx(0.03)


def test_onset_errors_one_entry_per_reference_note():
    ref = seq([(60, 0.0, 1.0), (62, 1.0, 2.0), (64, 2.0, 3.0)])
    est = seq([(60, 0.1, 1.0), (62, 1.1, 2.0), (64, 2.1, 3.0)])
    errors = onset_errors(est, ref)
    assert [nid for nid, _ in errors] == [n.id for n in ref]


def test_onset_errors_missing_estimate_is_infinite():
    ref = seq([(60, 0.0, 1.0), (62, 1.0, 2.0)])
    est = NoteSequence.from_values([(60, 0.0, 1.0)])
    errors = dict(onset_errors(est, ref))
    assert errors["n0"] == 0.0
    assert math.isinf(errors["n1"])


def test_onset_errors_disjoint_ids_raise():
    ref = seq([(60, 0.0, 1.0)])
    est = NoteSequence([dataclasses.replace(ref.notes[0], id="other")])
    with pytest.raises(ValueError):
        onset_errors(est, ref)


def test_onset_errors_id_map_translates():
    ref = seq([(60, 1.0, 2.0)])
    est = NoteSequence([dataclasses.replace(ref.notes[0], id="x9", onset=1.04, offset=2.0)])
    errors = dict(onset_errors(est, ref, id_map={"x9": "n0"}))
    assert errors["n0"] == pytest.approx(0.04)


def test_onset_errors_ignore_offsets():
    ref = seq([(60, 1.0, 2.0)])
    est = NoteSequence([dataclasses.replace(ref.notes[0], offset=9.0)])
    assert dict(onset_errors(est, ref))["n0"] == 0.0


def recount(errors):
    """Independent per-tolerance recount plus loop-computed statistics."""
    finite = [e for _, e in errors if math.isfinite(e)]
    if finite:
        mean = sum(finite) / len(finite)
        ordered = sorted(finite)
        mid = len(ordered) // 2
        if len(ordered) % 2:
            median = ordered[mid]
        else:
            median = (ordered[mid - 1] + ordered[mid]) / 2
        std = math.sqrt(sum((e - mean) ** 2 for e in finite) / len(finite))
    else:
        mean = median = std = math.inf
    accuracy = {}
    for tol in TOLERANCES:
        hits = sum(1 for _, e in errors if e <= tol)
        accuracy[tol] = 100.0 * hits / len(errors)
    return mean, median, std, accuracy


error_lists = st.lists(
    st.tuples(st.integers(0, 10_000),
              st.one_of(st.floats(0.0, 0.4), st.just(math.inf))),
    min_size=1, max_size=60,
).map(lambda rows: [(f"n{i}", e) for i, (_, e) in enumerate(rows)])


@settings(max_examples=60, deadline=None)
@given(error_lists)
def test_accuracy_report_matches_recount(errors):
    report = accuracy_report(errors)
    mean, median, std, accuracy = recount(errors)
    if math.isfinite(mean):
        assert report.mean == pytest.approx(mean)
        assert report.median == pytest.approx(median)
        assert report.std == pytest.approx(std, abs=1e-12)
    else:
        assert math.isinf(report.mean)
    for tol in TOLERANCES:
        assert report.accuracy[tol] == pytest.approx(accuracy[tol])


@settings(max_examples=40, deadline=None)
@given(error_lists)
def test_accuracy_nondecreasing_in_tolerance(errors):
    report = accuracy_report(errors)
    ordered = [report.accuracy[tol] for tol in sorted(report.accuracy)]
    assert all(a <= b for a, b in zip(ordered, ordered[1:]))


@settings(max_examples=30, deadline=None)
@given(error_lists, st.randoms(use_true_random=False))
def test_accuracy_report_permutation_invariant(errors, rng):
    base = accuracy_report(errors)
    shuffled = list(errors)
    rng.shuffle(shuffled)
    other = accuracy_report(shuffled)
    assert other.mean == pytest.approx(base.mean, rel=1e-12)
    assert other.accuracy == base.accuracy


def test_accuracy_report_empty_raises():
    with pytest.raises(ValueError):
        accuracy_report([])


def test_accuracy_report_all_infinite():
    report = accuracy_report([("a", math.inf), ("b", math.inf)])
    assert math.isinf(report.mean)
    assert all(acc == 0.0 for acc in report.accuracy.values())


def test_accuracy_boundary_error_counts_as_hit():
    report = accuracy_report([("a", 0.010)])
    assert report.accuracy[0.010] == 100.0


def test_match_by_pitch_and_time_nearest_within_window():
    ref = seq([(60, 1.0, 2.0)])
    est = seq([(60, 0.96, 2.0), (60, 1.01, 2.0)])
    assert match_by_pitch_and_time(est, ref) == {"n1": "n0"}


def test_match_by_pitch_and_time_respects_window():
    ref = seq([(60, 1.0, 2.0)])
    est = seq([(60, 1.2, 2.0)])
    assert match_by_pitch_and_time(est, ref, window=0.05) == {}
    assert match_by_pitch_and_time(est, ref, window=0.3) == {"n0": "n0"}


def test_match_by_pitch_and_time_never_crosses_pitch():
    ref = seq([(60, 1.0, 2.0)])
    est = seq([(61, 1.0, 2.0)])
    assert match_by_pitch_and_time(est, ref) == {}


def test_match_by_pitch_and_time_claims_each_estimate_once():
    ref = seq([(60, 1.00, 2.0), (60, 1.02, 2.0)])
    est = seq([(60, 1.01, 2.0)])
    mapping = match_by_pitch_and_time(est, ref)
    assert list(mapping.values()) == ["n0"]


def test_report_dict_round_trip_with_infinities():
    report = accuracy_report([("a", 0.004), ("b", math.inf), ("c", 0.08)])
    data = report_to_dict(report)
    assert data["per_note_errors"][1] == ["b", None]
    back = report_from_dict(data)
    assert back.mean == pytest.approx(report.mean)
    assert back.accuracy == report.accuracy
    assert back.per_note_errors == report.per_note_errors


def test_compare_methods_converts_to_milliseconds():
    report = accuracy_report([("a", 0.004), ("b", 0.016)])
    rows = compare_methods([("dtw", report)])
    assert rows[0]["method"] == "dtw"
    assert rows[0]["mean_ms"] == pytest.approx(10.0)
    assert rows[0]["acc_10ms"] == 50.0
    assert rows[0]["acc_100ms"] == 100.0


def test_compare_methods_empty_raises():
    with pytest.raises(ValueError):
        compare_methods([])


def test_write_comparison_csv_two_decimals(tmp_path):
    report = accuracy_report([("a", 0.0123456)])
    rows = compare_methods([("none", report)])
    out = tmp_path / "table.csv"
    write_comparison_csv(rows, out)
    lines = out.read_text().strip().splitlines()
    assert lines[0].startswith("method,mean_ms")
    assert lines[1].split(",")[1] == "12.35"
    assert all(len(cell.split(".")[-1]) == 2 for cell in lines[1].split(",")[1:])
