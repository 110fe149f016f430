#!/usr/bin/env python3
"""Train the fine-alignment CRNN on a synthesized corpus and report test accuracy.

Generates random piano pieces, renders them with the additive synthesizer,
segments them at silences, perturbs note timings to create unaligned copies,
trains the network to recover the aligned rolls, and evaluates onset accuracy
on a held-out split against the unaligned baseline.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from rollsync.augment import AugmentConfig, perturb_timing
from rollsync.crnn import (ModelConfig, TrainConfig, infer, model_from_weights,
                           save_weights, train, write_training_log)
from rollsync.evaluate import TOLERANCES, accuracy_report, onset_errors
from rollsync.features import compute_cqt, log_scale, pad_pair, render_notes_to_audio
from rollsync.pipeline import MATCH_WINDOW
from rollsync.postprocess import match_notes, threshold_and_segment, update_sequence
from rollsync.symbolic import random_piece, segment_at_silence, to_piano_roll


def build_corpus(n_pieces: int, piece_len: float, segment_len: float,
                 max_dev: float, seed: int, fps: float = 100.0):
    """Synthesize pieces and return per-segment training triplets.

    Each entry is (roll_in, spec, roll_ref, seq_unaligned, seq_aligned,
    piece_index); rolls and spectrograms are padded to a common length.
    """
    root = np.random.SeedSequence(seed)
    acfg = AugmentConfig(max_dev=max_dev, seed=seed)
    out = []
    for p in range(n_pieces):
        piece_rng = np.random.default_rng(np.random.SeedSequence(
            entropy=seed, spawn_key=(p,)))
        seq = random_piece(piece_rng, duration=piece_len)
        audio = render_notes_to_audio(seq)
        alen = len(audio.samples) / audio.sample_rate
        feat = log_scale(compute_cqt(audio))
        for s, (part, (t0, t1)) in enumerate(segment_at_silence(seq, alen, segment_len)):
            f0, f1 = round(t0 * fps), round(t1 * fps)
            spec = feat.values[f0:f1]
            seg_rng = np.random.default_rng(np.random.SeedSequence(
                entropy=seed, spawn_key=(p, s)))
            part_u = perturb_timing(part, acfg, seg_rng)
            roll_in = to_piano_roll(part_u, fps=fps).frames.astype(np.float32)
            roll_ref = to_piano_roll(part, fps=fps).frames.astype(np.float32)
            n = max(len(spec), len(roll_in), len(roll_ref))
            pad = lambda x: np.pad(x, ((0, n - len(x)), (0, 0)))
            out.append((pad(roll_in), pad(spec.astype(np.float32)), pad(roll_ref),
                        part_u, part, p))
    return out


def evaluate_split(model, segments, fps: float = 100.0):
    """Run inference + postprocessing on segments; pool onset errors."""
    est_errors: list[tuple[str, float]] = []
    base_errors: list[tuple[str, float]] = []
    for k, (roll_in, spec, _roll_ref, seq_u, seq_a, _p) in enumerate(segments):
        act = infer(roll_in, spec, model)
        blocks = threshold_and_segment(act, fps=fps)
        pairs = match_notes(blocks, seq_u, max_distance=MATCH_WINDOW)
        est = update_sequence(seq_u, pairs)
        est_errors += [(f"{k}/{nid}", e) for nid, e in onset_errors(est, seq_a)]
        base_errors += [(f"{k}/{nid}", e) for nid, e in onset_errors(seq_u, seq_a)]
    return accuracy_report(est_errors), accuracy_report(base_errors)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pieces", type=int, default=100)
    ap.add_argument("--piece-len", type=float, default=30.0)
    ap.add_argument("--segment-len", type=float, default=10.0)
    ap.add_argument("--max-dev", type=float, default=0.100)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--min-epochs", type=int, default=6)
    ap.add_argument("--patience", type=int, default=3)
    ap.add_argument("--lr", type=float, default=0.003)
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--hidden", type=int, default=128)
    ap.add_argument("--dense", type=int, default=128)
    ap.add_argument("--dropout", type=float, default=0.0)
    ap.add_argument("--train-frac", type=float, default=0.70)
    ap.add_argument("--valid-frac", type=float, default=0.15)
    ap.add_argument("--out", type=Path, default=Path("work/crnn_run"))
    args = ap.parse_args(argv)

    torch.set_num_threads(1)
    t0 = time.time()
    segments = build_corpus(args.pieces, args.piece_len, args.segment_len,
                            args.max_dev, args.seed)
    n_train_pieces = round(args.pieces * args.train_frac)
    n_valid_pieces = round(args.pieces * args.valid_frac)
    train_set = [s[:3] for s in segments if s[5] < n_train_pieces]
    valid_set = [s[:3] for s in segments
                 if n_train_pieces <= s[5] < n_train_pieces + n_valid_pieces]
    test_set = [s for s in segments if s[5] >= n_train_pieces + n_valid_pieces]
    print(f"corpus: {len(train_set)} train / {len(valid_set)} valid / "
          f"{len(test_set)} test segments ({time.time() - t0:.0f}s)", flush=True)

    mcfg = ModelConfig(dense_embed=args.dense, rnn_hidden=args.hidden,
                       dropout=args.dropout)
    tcfg = TrainConfig(lr=args.lr, batch_size=args.batch,
                       max_epochs=args.epochs, min_epochs=args.min_epochs,
                       patience=args.patience, seed=args.seed)
    store, log = train({"train": train_set, "valid": valid_set}, mcfg, tcfg)
    for epoch, tl, vl in log:
        print(f"epoch {epoch}: train {tl:.4f} valid {vl:.4f}", flush=True)

    args.out.mkdir(parents=True, exist_ok=True)
    save_weights(store, args.out / "weights.pt")
    write_training_log(log, args.out / "training_log.csv")

    model = model_from_weights(store)
    if not test_set:
        print("no test segments; skipping evaluation")
        return 0
    report, baseline = evaluate_split(model, test_set)
    summary = {
        "segments": {"train": len(train_set), "valid": len(valid_set),
                     "test": len(test_set)},
        "model": {"accuracy": report.accuracy, "mean_ms": report.mean * 1000},
        "unaligned": {"accuracy": baseline.accuracy,
                      "mean_ms": baseline.mean * 1000},
        "minutes": (time.time() - t0) / 60,
    }
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2))
    for tol in TOLERANCES:
        print(f"acc@{tol * 1000:.0f}ms  model {report.accuracy[tol]:6.2f}  "
              f"unaligned {baseline.accuracy[tol]:6.2f}", flush=True)
    print(f"mean error  model {report.mean * 1000:.1f} ms  "
          f"unaligned {baseline.mean * 1000:.1f} ms")
    print(f"total {(time.time() - t0) / 60:.1f} min")
    return 0


if __name__ == "__main__":
    sys.exit(main())
