"""Chroma/onset features and dynamic time warping for the baseline aligner.

Two aligners are provided: `dtw_full` (exact dynamic program over the whole
cost matrix) and `mrmsdtw` (multi-resolution: solve coarse, refine inside a
narrow band, never materializing more cells than the memory budget allows).
Both produce a `WarpPath` that `apply_warp` uses to move note times from the
symbolic axis onto the audio axis.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import maximum_filter1d

from .features import FeatureMatrix
from .symbolic import NoteSequence, PianoRoll, PITCH_MIN

logger = logging.getLogger(__name__)

#: causal post-onset decay, newest frame first
DECAY_KERNEL = (1.0, 0.8, 0.6, 0.4, 0.2)
DEFAULT_STEPS = ((1, 1), (1, 2), (2, 1))
DEFAULT_WEIGHTS = (2.0, 1.5, 1.5)
#: shortest note duration allowed to survive warping, seconds
MIN_WARP_DURATION = 0.010
_NORM_FLOOR = 1e-12


@dataclass
class CostConfig:
    step_sizes: tuple = DEFAULT_STEPS
    step_weights: tuple = DEFAULT_WEIGHTS
    metric: str = "cosine"
    chroma_weight: float = 1.0
    onset_weight: float = 1.0

    def __post_init__(self):
        if len(self.step_sizes) != len(self.step_weights):
            raise ValueError("step_sizes and step_weights differ in length")
        for di, dj in self.step_sizes:
            if di < 0 or dj < 0 or (di, dj) == (0, 0):
                raise ValueError(f"invalid step ({di}, {dj})")
        if any(w < 0 for w in self.step_weights) or not any(self.step_weights):
            raise ValueError("step weights must be non-negative, not all zero")
        if self.metric not in ("cosine", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.chroma_weight < 0 or self.onset_weight < 0:
            raise ValueError("feature weights must be non-negative")
        if self.chroma_weight == 0 and self.onset_weight == 0:
            raise ValueError("feature weights must not both be zero")


@dataclass
class WarpPath:
    """Monotone correspondence between frame axes A (symbolic) and B (audio)."""

    pairs: np.ndarray
    fps_a: float = 50.0
    fps_b: float = 50.0

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64)
        if self.pairs.ndim != 2 or self.pairs.shape[1] != 2 or not len(self.pairs):
            raise ValueError("path must be a non-empty (L, 2) array")
        if tuple(self.pairs[0]) != (0, 0):
            raise ValueError("path must start at (0, 0)")
        deltas = np.diff(self.pairs, axis=0)
        if len(deltas) and (deltas.min() < 0 or (deltas.sum(axis=1) == 0).any()):
            raise ValueError("path must advance monotonically")

    def __len__(self):
        return len(self.pairs)


def _values(feat) -> np.ndarray:
    if isinstance(feat, FeatureMatrix):
        return feat.values
    if isinstance(feat, PianoRoll):
        return feat.frames.astype(np.float64)
    return np.asarray(feat, dtype=np.float64)


def _fps_of(feat, default: float) -> float:
    return float(feat.fps) if isinstance(feat, (FeatureMatrix, PianoRoll)) else default


def _fold_pitch_classes(values: np.ndarray) -> np.ndarray:
    classes = (PITCH_MIN + np.arange(values.shape[1])) % 12
    folded = np.zeros((len(values), 12))
    for c in range(12):
        folded[:, c] = values[:, classes == c].sum(axis=1)
    return folded


def chroma_from_features(feat, fps: float = 100.0) -> FeatureMatrix:
    """Fold an 88-bin matrix (CQT, mel, or piano roll) to pitch classes.

    Each frame is L2-normalized; all-silent frames become the uniform vector
    so that cosine costs stay defined.
    """
    values = _values(feat)
    folded = _fold_pitch_classes(values)
    norms = np.linalg.norm(folded, axis=1)
    silent = norms < _NORM_FLOOR
    folded[silent] = 1.0 / math.sqrt(12.0)
    folded[~silent] /= norms[~silent, None]
    return FeatureMatrix(folded, _fps_of(feat, fps), "chroma")


def dlnco_from_features(feat, fps: float = 100.0, window_seconds: float = 1.0,
                        eps: float = 1e-4,
                        kernel: tuple = DECAY_KERNEL) -> FeatureMatrix:
    """Decayed locally normalized onset features from an 88-bin matrix.

    Half-wave rectified temporal difference, folded to pitch classes, frame
    norms divided by their local maximum over a centered window (floored at
    eps), then smeared forward in time with a short decaying kernel.
    """
    values = _values(feat)
    out_fps = _fps_of(feat, fps)
    diff = np.maximum(0.0, np.diff(values, axis=0, prepend=0.0))
    folded = _fold_pitch_classes(diff)
    half = max(1, int(round(out_fps * window_seconds / 2)))
    norms = np.linalg.norm(folded, axis=1)
    local_max = maximum_filter1d(norms, size=2 * half + 1, mode="nearest")
    folded /= np.maximum(local_max, eps)[:, None]
    out = np.zeros_like(folded)
    for k, coeff in enumerate(kernel):
        out[k:] += coeff * folded[: len(folded) - k if k else None]
    return FeatureMatrix(out, out_fps, "dlnco")


def combine_features(chroma: FeatureMatrix, dlnco: FeatureMatrix) -> np.ndarray:
    """Stack chroma and onset features into the 24-column block dtw expects."""
    if chroma.kind != "chroma" or dlnco.kind != "dlnco":
        raise ValueError("expected a chroma and a dlnco feature matrix")
    if len(chroma.values) != len(dlnco.values) or chroma.fps != dlnco.fps:
        raise ValueError("chroma and dlnco features are not frame-aligned")
    return np.hstack([chroma.values, dlnco.values])


def _cosine_cost(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    nx = np.maximum(np.linalg.norm(x, axis=1), _NORM_FLOOR)
    ny = np.maximum(np.linalg.norm(y, axis=1), _NORM_FLOOR)
    sim = (x @ y.T) / np.outer(nx, ny)
    return 1.0 - np.clip(sim, -1.0, 1.0)


def _euclidean_cost(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)[:, None] + (y * y).sum(axis=1)[None, :] - 2.0 * x @ y.T
    return np.sqrt(np.maximum(sq, 0.0))


def local_cost_matrix(a: np.ndarray, b: np.ndarray, cfg: CostConfig) -> np.ndarray:
    """Pairwise frame cost.

    24-column inputs are treated as chroma+onset blocks and scored as
    chroma_weight * cosine distance of the first half plus onset_weight *
    euclidean distance of the second half; anything else uses cfg.metric.
    """
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature dimensionality mismatch")
    if a.shape[1] == 24:
        return (cfg.chroma_weight * _cosine_cost(a[:, :12], b[:, :12])
                + cfg.onset_weight * _euclidean_cost(a[:, 12:], b[:, 12:]))
    if cfg.metric == "cosine":
        return _cosine_cost(a, b)
    return _euclidean_cost(a, b)


def _fallback_steps(cfg: CostConfig):
    """Unit steps appended when the configured set cannot reach the corner.

    They carry the maximum configured weight so they are never preferred where
    the regular steps suffice. This keeps degenerate geometries (such as one
    frame against many) alignable without distorting the usual optimum.
    """
    steps = list(cfg.step_sizes)
    weights = list(cfg.step_weights)
    w = max(weights)
    for extra in ((1, 0), (0, 1)):
        if extra not in steps:
            steps.append(extra)
            weights.append(w)
    return tuple(steps), tuple(weights)


def _accumulate(cost: np.ndarray, steps, weights) -> np.ndarray:
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    acc[0, 0] = cost[0, 0]
    row_steps = [(di, dj, w) for (di, dj), w in zip(steps, weights) if di > 0]
    in_row = [(dj, w) for (di, dj), w in zip(steps, weights) if di == 0]
    for i in range(n):
        row = acc[i]
        for di, dj, w in row_steps:
            if i - di < 0 or dj >= m:
                continue
            prev = acc[i - di]
            if dj == 0:
                np.minimum(row, prev + w * cost[i], out=row)
            else:
                np.minimum(row[dj:], prev[:-dj] + w * cost[i, dj:], out=row[dj:])
        for dj, w in in_row:
            for j in range(dj, m):
                cand = row[j - dj] + w * cost[i, j]
                if cand < row[j]:
                    row[j] = cand
    return acc


def _backtrack(acc: np.ndarray, cost: np.ndarray, steps, weights) -> np.ndarray:
    # diagonal first, then configured order, so equal-cost paths are unique
    order = sorted(range(len(steps)),
                   key=lambda k: (steps[k] != (1, 1), k))
    i, j = acc.shape[0] - 1, acc.shape[1] - 1
    pairs = [(i, j)]
    while (i, j) != (0, 0):
        for k in order:
            di, dj = steps[k]
            pi, pj = i - di, j - dj
            if pi < 0 or pj < 0:
                continue
            if acc[pi, pj] + weights[k] * cost[i, j] == acc[i, j]:
                i, j = pi, pj
                pairs.append((i, j))
                break
        else:
            raise RuntimeError(f"no predecessor for cell ({i}, {j})")
    return np.asarray(pairs[::-1], dtype=np.int64)


def dtw_full(a, b, cfg: CostConfig | None = None) -> tuple[WarpPath, float]:
    """Exact DTW over the full cost matrix.

    Returns the optimal path and its accumulated cost under cfg's weighted
    step set. If that step set cannot reach the terminal corner at all (the
    accumulated cost there is infinite), the computation is redone once with
    unit steps added at the maximum configured weight.
    """
    cfg = cfg or CostConfig()
    av, bv = _values(a), _values(b)
    if not len(av) or not len(bv):
        raise ValueError("cannot align empty feature matrices")
    cost = local_cost_matrix(av, bv, cfg)
    steps, weights = cfg.step_sizes, cfg.step_weights
    acc = _accumulate(cost, steps, weights)
    if not np.isfinite(acc[-1, -1]):
        steps, weights = _fallback_steps(cfg)
        acc = _accumulate(cost, steps, weights)
    pairs = _backtrack(acc, cost, steps, weights)
    path = WarpPath(pairs, _fps_of(a, 50.0), _fps_of(b, 50.0))
    return path, float(acc[-1, -1])


def path_cost(a, b, path: WarpPath, cfg: CostConfig | None = None) -> float:
    """Accumulated cost of an arbitrary valid path, mirroring the recurrence."""
    cfg = cfg or CostConfig()
    cost = local_cost_matrix(_values(a), _values(b), cfg)
    steps, weights = _fallback_steps(cfg)
    lookup = dict(zip(steps, weights))
    total = cost[0, 0]
    for (pi, pj), (i, j) in zip(path.pairs[:-1], path.pairs[1:]):
        step = (int(i - pi), int(j - pj))
        if step not in lookup:
            raise ValueError(f"path contains unsupported step {step}")
        total += lookup[step] * cost[i, j]
    return float(total)


def _downsample(values: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return values
    n = len(values)
    starts = np.arange(0, n, factor)
    sums = np.add.reduceat(values, starts, axis=0)
    counts = np.minimum(starts + factor, n) - starts
    return sums / counts[:, None]


def _band_from_path(pairs: np.ndarray, scale: float, n: int, m: int,
                    half_width: int) -> tuple[np.ndarray, np.ndarray]:
    """Project a coarser path onto a finer grid and widen it into a band."""
    ip = np.clip(np.round((pairs[:, 0] + 0.5) * scale - 0.5).astype(int), 0, n - 1)
    jp = np.clip((pairs[:, 1] + 0.5) * scale - 0.5, 0.0, m - 1.0)
    anchors_i, inverse = np.unique(ip, return_inverse=True)
    anchors_j = np.bincount(inverse, weights=jp) / np.bincount(inverse)
    centers = np.interp(np.arange(n), anchors_i, anchors_j)
    lo = np.clip(np.floor(centers).astype(int) - half_width, 0, m - 1)
    hi = np.clip(np.ceil(centers).astype(int) + half_width, 0, m - 1)
    lo[0] = 0
    hi[-1] = m - 1
    for i in range(1, n):  # monotone and connected to the previous row
        lo[i] = min(max(lo[i], lo[i - 1]), hi[i - 1])
    for i in range(n - 2, -1, -1):
        hi[i] = max(min(hi[i], hi[i + 1]), lo[i])
    return lo, hi


def _banded_dtw(av: np.ndarray, bv: np.ndarray, cfg: CostConfig,
                lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """DTW restricted to hold only band-shaped arrays; returns path pairs."""
    n, m = len(av), len(bv)
    width = int((hi - lo + 1).max())
    for steps, weights in (cfg.step_sizes, cfg.step_weights), _fallback_steps(cfg):
        order = sorted(range(len(steps)), key=lambda k: (steps[k] != (1, 1), k))
        acc = np.full((n, width), np.inf)
        take = np.full((n, width), -1, dtype=np.int8)
        rows = [local_cost_matrix(av[i:i + 1], bv[lo[i]:hi[i] + 1], cfg)[0]
                for i in range(n)]
        acc[0, 0] = rows[0][0]
        for i in range(n):
            w_i = hi[i] - lo[i] + 1
            j = lo[i] + np.arange(w_i)
            acc_row = acc[i, :w_i]
            take_row = take[i, :w_i]
            for k in order:
                di, dj = steps[k]
                if di > i:
                    continue
                if di == 0:
                    for jj in range(w_i):  # within-row, sequential by nature
                        pj = j[jj] - dj
                        if lo[i] <= pj <= hi[i]:
                            cand = acc_row[pj - lo[i]] + weights[k] * rows[i][jj]
                            if cand < acc_row[jj]:
                                acc_row[jj] = cand
                                take_row[jj] = k
                    continue
                pj = j - dj
                ok = (pj >= lo[i - di]) & (pj <= hi[i - di])
                if not ok.any():
                    continue
                cand = np.full(w_i, np.inf)
                cand[ok] = (acc[i - di, pj[ok] - lo[i - di]]
                            + weights[k] * rows[i][ok])
                better = cand < acc_row
                acc_row[better] = cand[better]
                take_row[better] = k
        if np.isfinite(acc[n - 1, m - 1 - lo[n - 1]]):
            break
    i, j = n - 1, m - 1
    pairs = [(i, j)]
    while (i, j) != (0, 0):
        k = take[i, j - lo[i]]
        if k < 0:
            raise RuntimeError(f"banded alignment broke at cell ({i}, {j})")
        di, dj = steps[k]
        i, j = i - di, j - dj
        pairs.append((i, j))
    return np.asarray(pairs[::-1], dtype=np.int64)


def mrmsdtw(a, b, cfg: CostConfig | None = None,
            memory_budget: int = 10 ** 6) -> WarpPath:
    """Memory-restricted multiscale DTW.

    Solves exactly when the full cost matrix fits in the budget. Otherwise
    aligns block-averaged features at a coarse factor, then repeatedly halves
    the factor, each time re-running DTW inside a band around the projected
    coarser path. The band half-width spends the whole cell budget (never
    below one frame), which keeps the refined path close to the true optimum
    even when it wanders far from the coarse projection.
    """
    if memory_budget < 10 ** 4:
        raise ValueError(f"memory budget {memory_budget} below the 10^4 minimum")
    cfg = cfg or CostConfig()
    av, bv = _values(a), _values(b)
    if not len(av) or not len(bv):
        raise ValueError("cannot align empty feature matrices")
    fps_a, fps_b = _fps_of(a, 50.0), _fps_of(b, 50.0)
    n, m = len(av), len(bv)
    if n * m <= memory_budget:
        return dtw_full(a, b, cfg)[0]

    factor = math.ceil(math.sqrt(n * m / memory_budget))
    pairs = dtw_full(_downsample(av, factor), _downsample(bv, factor), cfg)[0].pairs
    while factor > 1:
        coarser = factor
        factor = max(1, factor // 2)
        nf, mf = math.ceil(n / factor), math.ceil(m / factor)
        half = max(1, memory_budget // (2 * max(nf, mf)))
        lo, hi = _band_from_path(pairs, coarser / factor, nf, mf, half)
        pairs = _banded_dtw(_downsample(av, factor), _downsample(bv, factor),
                            cfg, lo, hi)
    return WarpPath(pairs, fps_a, fps_b)


def apply_warp(seq: NoteSequence, path: WarpPath) -> NoteSequence:
    """Map note times through the path from the symbolic axis to audio time.

    Plateaus (one source frame against several target frames) anchor to the
    mean target frame; between anchors the mapping is piecewise linear. Times
    beyond the path span are clamped with a warning.
    """
    if not len(seq):
        return seq
    src, inverse = np.unique(path.pairs[:, 0], return_inverse=True)
    dst = np.bincount(inverse, weights=path.pairs[:, 1]) / np.bincount(inverse)
    times = np.array([[n.onset, n.offset] for n in seq])
    x = times * path.fps_a
    if x.max() > src[-1] or x.min() < src[0]:
        logger.warning("note times extend past the warp path; clamping to span")
    y = np.interp(x, src, dst) / path.fps_b
    notes = []
    for note, (onset, offset) in zip(seq, y):
        if offset - onset < MIN_WARP_DURATION:
            offset = onset + MIN_WARP_DURATION
        notes.append(replace(note, onset=onset, offset=offset))
    duration = max(max(n.offset for n in notes), (src[-1] + 1) / path.fps_b)
    return NoteSequence(tuple(notes), duration)


def save_path_csv(path: WarpPath, file) -> None:
    """Dump path pairs as two-column CSV for inspection."""
    with open(file, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j"])
        writer.writerows(path.pairs.tolist())
