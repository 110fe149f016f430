#!/usr/bin/env python3
"""Run a small ablation grid over alignment settings on toy data.

Each grid point overrides a handful of config fields (method, feature type,
scaling, timing deviation, ...), evaluates on a fresh split, and appends a row
to experiment.csv. Finished points are persisted and skipped on re-run, so an
interrupted grid resumes where it stopped.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from rollsync.pipeline import PipelineConfig, make_demo_pieces, run_experiment

DEFAULT_GRID = [
    {"method": "none"},
    {"method": "dtw"},
    {"method": "dtw", "feature": "mel"},
    {"method": "dtw", "scale": "linear"},
    {"method": "dtw", "augment": {"max_dev": 0.050}},
    {"method": "dtw", "augment": {"max_tempo_factor": 0.10}},
]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("work/ablation"))
    ap.add_argument("--pieces", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--grid", type=Path, default=None,
                    help="JSON file with a list of override dicts")
    args = ap.parse_args(argv)

    grid = (json.loads(args.grid.read_text()) if args.grid else DEFAULT_GRID)
    base = PipelineConfig(data_dir=str(args.out / "data"),
                          work_dir=str(args.out / "work"))
    base.augment.seed = args.seed

    pieces = make_demo_pieces(n_pieces=args.pieces, seed=args.seed)
    rows = run_experiment(base, grid, pieces, args.out)
    for row in rows:
        status = row.get("error", f"mean {row.get('mean_ms', '?')} ms")
        print(f"{row['point']}: {status}")
    print(f"rows: {len(rows)}  csv: {args.out / 'experiment.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
