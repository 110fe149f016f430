"""Command-line interface.

Subcommands cover the full workflow: synthesize demo material, build an
augmented dataset, warm the feature cache, train, align, evaluate, and run
experiment grids. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .augment import (fraction_scheme, load_manifest, save_manifest,
                      split_dataset)
from .evaluate import (accuracy_report, compare_methods, match_by_pitch_and_time,
                       onset_errors)
from .features import load_wav, save_wav
from .symbolic import parse_midi, write_midi

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; the documented contract is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rollsync",
                     description="Align loosely aligned MIDI to piano audio.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="seed for every stochastic part")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("synth", help="synthesize demo pieces (audio + MIDI)")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--pieces", type=int, default=4)
    p.add_argument("--duration", type=float, default=30.0)

    p = sub.add_parser("augment", help="build dataset triplets from pieces")
    common(p)
    p.add_argument("--in", dest="in_dir", required=True,
                   help="directory of <name>.wav/<name>.mid pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--max-dev", type=float)
    p.add_argument("--tempo-factor", type=float)
    p.add_argument("--segment-len", type=float)
    p.add_argument("--scheme", help="JSON file mapping group tag to split")

    p = sub.add_parser("features", help="precompute the feature cache")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--feature", choices=pipeline.FEATURES)
    p.add_argument("--scale", choices=pipeline.SCALES)
    p.add_argument("--fps", type=int)
    p.add_argument("--work", help="work directory holding the cache")

    p = sub.add_parser("train", help="train the aligner network")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", choices=pipeline.METHODS)
    p.add_argument("--epochs", type=int, help="cap on training epochs")
    p.add_argument("--work", help="output directory for weights and log")

    p = sub.add_parser("align", help="align each triplet; write estimated MIDI")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", choices=pipeline.METHODS)
    p.add_argument("--weights")
    p.add_argument("--out", required=True)
    p.add_argument("--work")

    p = sub.add_parser("evaluate", help="report onset errors and accuracy")
    common(p)
    p.add_argument("--manifest", help="evaluate a method over a manifest")
    p.add_argument("--method", choices=pipeline.METHODS)
    p.add_argument("--weights")
    p.add_argument("--est", help="standalone mode: estimated MIDI file")
    p.add_argument("--ref", help="standalone mode: reference MIDI file")
    p.add_argument("--ids", help="standalone mode: id-map sidecar JSON")
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--work")

    p = sub.add_parser("experiment", help="run a config grid, resumable")
    common(p)
    p.add_argument("--grid", required=True,
                   help="JSON list of config override dicts")
    p.add_argument("--out", required=True)
    p.add_argument("--pieces", type=int, default=4)
    p.add_argument("--duration", type=float, default=30.0)
    return parser


def _overrides(args) -> dict:
    pairs = {
        "method": getattr(args, "method", None),
        "feature": getattr(args, "feature", None),
        "scale": getattr(args, "scale", None),
        "fps": getattr(args, "fps", None),
        "segment_len": getattr(args, "segment_len", None),
        "weights": getattr(args, "weights", None),
        "work_dir": getattr(args, "work", None),
        "augment.max_dev": getattr(args, "max_dev", None),
        "augment.max_tempo_factor": getattr(args, "tempo_factor", None),
        "train.max_epochs": getattr(args, "epochs", None),
    }
    overrides = {k: v for k, v in pairs.items() if v is not None}
    if getattr(args, "seed", None) is not None:
        overrides["augment.seed"] = args.seed
        overrides["train.seed"] = args.seed
    return overrides


def _load_config(args) -> pipeline.PipelineConfig:
    return pipeline.config_from_json(args.config, _overrides(args))


def _read_pieces(in_dir: Path):
    pieces = []
    for midi_path in sorted(in_dir.glob("*.mid")):
        wav_path = midi_path.with_suffix(".wav")
        if not wav_path.exists():
            raise FileNotFoundError(f"no audio next to {midi_path}")
        pieces.append((midi_path.stem, load_wav(wav_path), parse_midi(midi_path)))
    if not pieces:
        raise FileNotFoundError(f"no .mid files in {in_dir}")
    return pieces


def _cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    pieces = pipeline.make_demo_pieces(args.pieces, seed, args.duration)
    for name, audio, seq in pieces:
        save_wav(audio, out / f"{name}.wav")
        write_midi(seq, out / f"{name}.mid")
    print(f"wrote {len(pieces)} pieces to {out}")
    return 0


def _cmd_augment(args) -> int:
    cfg = _load_config(args)
    pieces = _read_pieces(Path(args.in_dir))
    triplets = pipeline.build_dataset(pieces, cfg.augment, args.out,
                                      target_len=cfg.segment_len)
    if args.scheme:
        scheme = json.loads(Path(args.scheme).read_text())
    else:
        scheme = fraction_scheme([t.group for t in triplets],
                                 {"train": 0.5, "valid": 0.25, "test": 0.25},
                                 seed=cfg.augment.seed)
    triplets = split_dataset(triplets, scheme)
    save_manifest(triplets, args.out)
    print(f"wrote {len(triplets)} triplets to {args.out}")
    return 0


def _cmd_features(args) -> int:
    cfg = _load_config(args)
    triplets = load_manifest(args.manifest)
    cache_dir = Path(cfg.work_dir) / "cache"
    for t in triplets:
        pipeline.audio_features(t.audio, cfg, cache_dir)
    print(f"cached features for {len(triplets)} files in {cache_dir}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    triplets = load_manifest(args.manifest)
    _, log = pipeline.train_model(cfg, triplets)
    best = min(entry[2] for entry in log)
    print(f"trained {len(log)} epochs, best validation loss {best:.5f}; "
          f"weights in {Path(cfg.work_dir) / 'weights.pt'}")
    return 0


def _est_stem(triplet) -> str:
    return f"{triplet.piece.replace('/', '_')}_seg{triplet.segment:03d}"


def _cmd_align(args) -> int:
    cfg = _load_config(args)
    triplets = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .augment import _rank_map

    for t in triplets:
        est = pipeline.run_align(cfg, t)
        est_path = out / f"{_est_stem(t)}.est.mid"
        write_midi(est, est_path)
        # sidecar: est-file ids -> aligned-file ids, so standalone evaluation
        # of the written file stays exact
        to_file = _rank_map(est, parse_midi(est_path))
        sidecar = {to_file[mem_id]: ref_id
                   for mem_id, ref_id in t.note_id_map.items()
                   if mem_id in to_file}
        (out / f"{_est_stem(t)}.ids.json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(f"aligned {len(triplets)} triplets into {out}")
    return 0


def _print_summary(name: str, report) -> None:
    row = compare_methods([(name, report)])[0]
    cells = "  ".join(f"{k}={v:.2f}" for k, v in row.items() if k != "method")
    print(f"{row['method']}: {cells}")


def _cmd_evaluate(args) -> int:
    if bool(args.manifest) == bool(args.est):
        raise ValueError("use either --manifest or --est/--ref, not both")
    if args.manifest:
        cfg = _load_config(args)
        triplets = load_manifest(args.manifest)
        report, per_piece = pipeline.evaluate_method(cfg, triplets)
        if args.out:
            pipeline.write_report(args.out, report, cfg, per_piece)
        _print_summary(cfg.method, report)
        return 0
    if not args.ref:
        raise ValueError("--est requires --ref")
    est = parse_midi(args.est)
    ref = parse_midi(args.ref)
    if args.ids:
        id_map = json.loads(Path(args.ids).read_text())
    else:
        id_map = match_by_pitch_and_time(est, ref)
    report = accuracy_report(onset_errors(est, ref, id_map))
    if args.out:
        pipeline.write_report(args.out, report)
    _print_summary(Path(args.est).name, report)
    return 0


def _cmd_experiment(args) -> int:
    cfg = _load_config(args)
    grid = json.loads(Path(args.grid).read_text())
    if not isinstance(grid, list):
        raise ValueError("grid file must hold a JSON list of override dicts")
    seed = args.seed if args.seed is not None else cfg.augment.seed
    pieces = pipeline.make_demo_pieces(args.pieces, seed, args.duration)
    rows = pipeline.run_experiment(cfg, grid, pieces, args.out)
    failed = sum("error" in r for r in rows)
    print(f"{len(rows)} grid points ({failed} failed); "
          f"table in {Path(args.out) / 'experiment.csv'}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "augment": _cmd_augment,
    "features": _cmd_features,
    "train": _cmd_train,
    "align": _cmd_align,
    "evaluate": _cmd_evaluate,
    "experiment": _cmd_experiment,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:
        print(f"rollsync {args.command}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 2


if __name__ == "__main__":
    sys.exit(main())
