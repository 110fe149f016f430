"""End-to-end orchestration: configs, alignment methods, experiments, reports.

Four alignment methods share one entry point: `none` passes the unaligned
MIDI through, `dtw` warps it onto the audio, `crnn` refines it with the
network, and `dtw_then_crnn` feeds the DTW result into the network. Reports
are deterministic for a fixed config and seed apart from their timestamp.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .augment import (AugmentConfig, DatasetTriplet, build_dataset,
                      fraction_scheme, split_dataset)
from .crnn import (ModelConfig, TrainConfig, WeightStore, infer, load_weights,
                   save_weights, train)
from .dtw_align import (CostConfig, WarpPath, apply_warp, chroma_from_features,
                  combine_features, dlnco_from_features, mrmsdtw)
from .evaluate import (AlignmentReport, accuracy_report, onset_errors,
                       report_to_dict)
from .features import (SAMPLE_RATE, AudioBuffer, FeatureMatrix, compute_cqt,
                       compute_mel, downsample_frames, load_wav, log_scale,
                       pad_pair, render_notes_to_audio, resample)
from .postprocess import match_notes, threshold_and_segment, update_sequence
from .symbolic import (VALID_FPS, NoteSequence, parse_midi, random_piece,
                       to_piano_roll)

logger = logging.getLogger(__name__)

METHODS = ("none", "dtw", "crnn", "dtw_then_crnn")
FEATURES = ("cqt", "mel")
SCALES = ("log", "linear")
DTW_TARGET_FPS = 50.0
# the network corrects fine timing; a predicted block farther than this from
# the input onset is a spurious detection, not a correction
MATCH_WINDOW = 0.25


@dataclass
class PipelineConfig:
    method: str = "dtw"
    feature: str = "cqt"
    scale: str = "log"
    fps: int = 100
    segment_len: float = 30.0
    dtw_budget: int = 10 ** 6
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: str = "data"
    work_dir: str = "work"
    weights: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.feature not in FEATURES:
            raise ValueError(f"feature must be one of {FEATURES}")
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}")
        if self.fps not in VALID_FPS:
            raise ValueError(f"fps must be one of {VALID_FPS}")
        if self.segment_len <= 0:
            raise ValueError("segment_len must be positive")


_NESTED = {"augment": AugmentConfig, "model": ModelConfig, "train": TrainConfig}


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(data: dict) -> PipelineConfig:
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(data)
    for key, cls in _NESTED.items():
        if key in kwargs and not isinstance(kwargs[key], cls):
            sub = dict(kwargs[key])
            if key == "model" and "conv_filters" in sub:
                sub["conv_filters"] = tuple(sub["conv_filters"])
            kwargs[key] = cls(**sub)
    return PipelineConfig(**kwargs)


def config_from_json(path, overrides: dict | None = None) -> PipelineConfig:
    """Load a JSON config file and layer overrides on top of it."""
    data = json.loads(Path(path).read_text()) if path else {}
    for key, value in (overrides or {}).items():
        if "." in key:
            outer, inner = key.split(".", 1)
            data.setdefault(outer, {})
            if not isinstance(data[outer], dict):
                raise ValueError(f"cannot override {key}: {outer} is not a section")
            data[outer][inner] = value
        else:
            data[key] = value
    return config_from_dict(data)


def _cache_key(path: Path, cfg: PipelineConfig) -> str:
    stat = path.stat()
    text = f"{path.resolve()}:{stat.st_size}:{stat.st_mtime_ns}:" \
           f"{cfg.feature}:{cfg.scale}:{cfg.fps}"
    return hashlib.sha1(text.encode()).hexdigest()[:16]


def audio_features(audio_path, cfg: PipelineConfig,
                   cache_dir=None) -> FeatureMatrix:
    """Spectrogram of one file per the config, with optional .npz caching."""
    audio_path = Path(audio_path)
    cache_file = None
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        cache_file = cache_dir / f"feat_{_cache_key(audio_path, cfg)}.npz"
        if cache_file.exists():
            stored = np.load(cache_file)
            return FeatureMatrix(stored["values"], float(stored["fps"]),
                                 str(stored["kind"]))
    audio = resample(load_wav(audio_path), SAMPLE_RATE)
    hop = SAMPLE_RATE // cfg.fps
    if cfg.feature == "cqt":
        feat = compute_cqt(audio, hop=hop)
    else:
        feat = compute_mel(audio, hop=hop)
    if cfg.scale == "log":
        feat = log_scale(feat)
    if cache_file is not None:
        np.savez(cache_file, values=feat.values, fps=feat.fps, kind=feat.kind)
    return feat


def dtw_align(seq: NoteSequence, afeat: FeatureMatrix,
              budget: int = 10 ** 6,
              cost_cfg: CostConfig | None = None) -> tuple[NoteSequence, WarpPath]:
    """Warp a sequence onto the audio using chroma+onset features at ~50 fps."""
    factor = max(1, int(round(afeat.fps / DTW_TARGET_FPS)))
    audio_feat = downsample_frames(afeat, factor)
    roll_fps = int(round(audio_feat.fps))
    roll = to_piano_roll(seq, fps=roll_fps)
    a = combine_features(chroma_from_features(roll), dlnco_from_features(roll))
    b = combine_features(chroma_from_features(audio_feat),
                         dlnco_from_features(audio_feat))
    path = mrmsdtw(a, b, cost_cfg, budget)
    path = replace(path, fps_a=float(roll_fps), fps_b=audio_feat.fps)
    return apply_warp(seq, path), path


def _resolve_weights(cfg: PipelineConfig, weights) -> WeightStore:
    if isinstance(weights, WeightStore):
        return weights
    if weights is not None:
        return load_weights(weights)
    if cfg.weights:
        return load_weights(cfg.weights)
    raise ValueError(f"method {cfg.method!r} needs trained weights; "
                     "pass them or set the weights path in the config")


def run_align(cfg: PipelineConfig, triplet: DatasetTriplet,
              weights=None) -> NoteSequence:
    """Produce the estimated aligned sequence for one triplet."""
    seq = parse_midi(triplet.unaligned_midi)
    if cfg.method == "none":
        return seq
    cache_dir = Path(cfg.work_dir) / "cache"
    afeat = audio_features(triplet.audio, cfg, cache_dir)
    if cfg.method == "dtw":
        return dtw_align(seq, afeat, cfg.dtw_budget)[0]
    store = _resolve_weights(cfg, weights)
    base = seq
    if cfg.method == "dtw_then_crnn":
        base = dtw_align(seq, afeat, cfg.dtw_budget)[0]
    roll, feat = pad_pair(to_piano_roll(base, fps=cfg.fps), afeat)
    act = infer(roll, feat, store)
    blocks = threshold_and_segment(act, cfg.fps)
    return update_sequence(base, match_notes(blocks, base,
                                             max_distance=MATCH_WINDOW))


def prepare_examples(cfg: PipelineConfig, triplets: list[DatasetTriplet]) -> dict:
    """Load split-annotated triplets into in-memory training arrays."""
    cache_dir = Path(cfg.work_dir) / "cache"
    splits: dict[str, list] = {"train": [], "valid": []}
    for t in triplets:
        if t.split not in splits:
            continue
        seq_in = parse_midi(t.unaligned_midi)
        afeat = audio_features(t.audio, cfg, cache_dir)
        if cfg.method == "dtw_then_crnn":
            seq_in = dtw_align(seq_in, afeat, cfg.dtw_budget)[0]
        roll_in = to_piano_roll(seq_in, fps=cfg.fps).frames.astype(np.float32)
        roll_ref = to_piano_roll(parse_midi(t.aligned_midi),
                                 fps=cfg.fps).frames.astype(np.float32)
        spec = afeat.values.astype(np.float32)
        n = max(len(roll_in), len(roll_ref), len(spec))

        def pad(x):
            return np.pad(x, ((0, n - len(x)), (0, 0))) if len(x) < n else x

        splits[t.split].append((pad(roll_in), pad(spec), pad(roll_ref)))
    return splits


def train_model(cfg: PipelineConfig,
                triplets: list[DatasetTriplet]) -> tuple[WeightStore, list]:
    """Train on the manifest's train/valid splits; persist weights and log."""
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    examples = prepare_examples(cfg, triplets)
    store, log = train(examples, cfg.model, cfg.train,
                       log_path=work / "training_log.csv")
    save_weights(store, work / "weights.pt")
    return store, log


def evaluate_method(cfg: PipelineConfig, triplets: list[DatasetTriplet],
                    weights=None) -> tuple[AlignmentReport, dict]:
    """Align every triplet and pool onset errors into one report.

    Returns the pooled report plus per-piece sub-reports. Error ids are
    prefixed with piece/segment so pooling never collides.
    """
    if not triplets:
        raise ValueError("no triplets to evaluate")
    pooled = []
    by_piece: dict[str, list] = {}
    for t in triplets:
        est = run_align(cfg, t, weights)
        ref = parse_midi(t.aligned_midi)
        errors = onset_errors(est, ref, id_map=t.note_id_map or None)
        prefix = f"{t.piece}/{t.segment:03d}/"
        pooled.extend((prefix + note_id, err) for note_id, err in errors)
        by_piece.setdefault(t.piece, []).extend(errors)
    per_piece = {piece: accuracy_report(errs) for piece, errs in by_piece.items()}
    return accuracy_report(pooled), per_piece


def write_report(path, report: AlignmentReport, cfg: PipelineConfig | None = None,
                 per_piece: dict | None = None, extra: dict | None = None) -> None:
    """JSON report; `generated_at` is the only run-dependent field."""
    payload = {
        "generated_at": datetime.now(timezone.utc).isoformat(),
        "report": report_to_dict(report),
    }
    if cfg is not None:
        payload["config"] = config_to_dict(cfg)
    if per_piece:
        payload["per_piece"] = {k: report_to_dict(v) for k, v in sorted(per_piece.items())}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def reports_equal(path_a, path_b) -> bool:
    """Compare two report files ignoring their generation timestamps."""
    a = json.loads(Path(path_a).read_text())
    b = json.loads(Path(path_b).read_text())
    a.pop("generated_at", None)
    b.pop("generated_at", None)
    return a == b


def make_demo_pieces(n_pieces: int = 4, seed: int = 0, duration: float = 30.0,
                     **piece_kwargs) -> list[tuple[str, AudioBuffer, NoteSequence]]:
    """Synthesize random pieces (one group each) for demos and experiments."""
    rng = np.random.default_rng(seed)
    pieces = []
    for i in range(n_pieces):
        seq = random_piece(rng, duration=duration, **piece_kwargs)
        pieces.append((f"piece{i:02d}", render_notes_to_audio(seq), seq))
    return pieces


def _flatten(overrides: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in overrides.items():
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{prefix}{key}."))
        else:
            flat[f"{prefix}{key}"] = value
    return flat


def _apply_overrides(cfg: PipelineConfig, overrides: dict) -> PipelineConfig:
    data = config_to_dict(cfg)
    for key, value in overrides.items():
        if isinstance(value, dict):
            data[key] = {**data.get(key, {}), **value}
        else:
            data[key] = value
    return config_from_dict(data)


def run_experiment(base_cfg: PipelineConfig, grid: list[dict], pieces,
                   out_dir) -> list[dict]:
    """Evaluate one config variant per grid point; resumes finished points.

    Each point gets its own directory and a persisted row file; existing row
    files are trusted and skipped, so an interrupted grid picks up where it
    stopped. Failures become rows with an `error` field and the grid goes on.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for index, overrides in enumerate(grid):
        digest = hashlib.sha1(
            json.dumps(overrides, sort_keys=True).encode()).hexdigest()[:8]
        point = f"{index:03d}_{digest}"
        row_path = out_dir / f"point_{point}.json"
        if row_path.exists():
            rows.append(json.loads(row_path.read_text()))
            continue
        row = {"point": point, **_flatten(overrides)}
        try:
            row.update(_run_point(base_cfg, overrides, pieces,
                                  out_dir / f"run_{point}"))
        except Exception as exc:  # keep the grid going, record the failure
            logger.error("grid point %s failed: %s", point, exc)
            row["error"] = str(exc)
        row_path.write_text(json.dumps(row, indent=2, sort_keys=True) + "\n")
        rows.append(row)
    _write_grid_csv(rows, out_dir / "experiment.csv")
    return rows


def _run_point(base_cfg: PipelineConfig, overrides: dict, pieces,
               point_dir: Path) -> dict:
    cfg = _apply_overrides(base_cfg, overrides)
    cfg = replace(cfg, data_dir=str(point_dir / "data"),
                  work_dir=str(point_dir / "work"))
    triplets = build_dataset(pieces, cfg.augment, cfg.data_dir,
                             target_len=cfg.segment_len)
    groups = [t.group for t in triplets]
    scheme = fraction_scheme(groups, {"train": 0.5, "valid": 0.25, "test": 0.25},
                             seed=cfg.augment.seed)
    triplets = split_dataset(triplets, scheme)
    weights = None
    if cfg.method in ("crnn", "dtw_then_crnn"):
        weights, _ = train_model(cfg, triplets)
    test = [t for t in triplets if t.split == "test"] or triplets
    report, _ = evaluate_method(cfg, test, weights)
    row = {"method": cfg.method, "fps": cfg.fps, "feature": cfg.feature,
           "scale": cfg.scale, "mean_ms": round(report.mean * 1000.0, 2),
           "median_ms": round(report.median * 1000.0, 2)}
    for tol in sorted(report.accuracy, reverse=True):
        row[f"acc_{round(tol * 1000)}ms"] = round(report.accuracy[tol], 2)
    return row


def _write_grid_csv(rows: list[dict], path: Path) -> None:
    import csv

    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, restval="")
        writer.writeheader()
        writer.writerows(rows)
