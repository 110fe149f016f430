"""Convolutional-recurrent aligner: two conv branches, BiLSTM, sigmoid head.

The network consumes an unaligned piano roll and a log-scaled spectrogram
(equal frame counts) and emits per-frame pitch activations for the aligned
roll. Training minimizes binary cross entropy against the aligned roll with
Adam and early stopping on validation loss.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .features import FeatureMatrix, compute_cqt, load_wav, log_scale, resample
from .symbolic import NUM_PITCHES, PianoRoll, parse_midi, to_piano_roll

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class WeightLoadError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    conv_filters: tuple = (16, 16, 32)
    kernel_size: int = 3
    dense_embed: int = 256
    rnn_hidden: int = 256
    rnn_cell: str = "lstm"
    dropout: float = 0.5
    bidirectional: bool = True
    blind_transcription: bool = False

    def __post_init__(self):
        if len(self.conv_filters) != 3 or any(f < 1 for f in self.conv_filters):
            raise ValueError("conv_filters must be three positive counts")
        if self.rnn_cell not in ("lstm", "gru"):
            raise ValueError(f"rnn_cell must be lstm or gru, got {self.rnn_cell!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.kernel_size < 1 or self.dense_embed < 1 or self.rnn_hidden < 1:
            raise ValueError("layer sizes must be positive")


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 8
    max_epochs: int = 200
    min_epochs: int = 50
    patience: int = 10
    seed: int = 0
    sequence_crop: int = 3000

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.min_epochs > self.max_epochs:
            raise ValueError("min_epochs exceeds max_epochs")
        if self.patience < 1 or self.sequence_crop < 8:
            raise ValueError("patience and sequence_crop must be sensible")


@dataclass
class WeightStore:
    model_config: ModelConfig
    tensors: dict
    format_version: int = FORMAT_VERSION


class _ConvBranch(nn.Module):
    """Conv stack reducing the pitch axis 88 -> 44 -> 22, then a frame-wise dense."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        f1, f2, f3 = cfg.conv_filters
        k = cfg.kernel_size
        self.conv1 = nn.Conv2d(1, f1, k, padding="same")
        self.bn1 = nn.BatchNorm2d(f1)
        self.conv2 = nn.Conv2d(f1, f2, k, padding="same")
        self.bn2 = nn.BatchNorm2d(f2)
        self.conv3 = nn.Conv2d(f2, f3, k, padding="same")
        self.bn3 = nn.BatchNorm2d(f3)
        self.pool = nn.MaxPool2d((1, 2))
        self.fc = nn.Linear(f3 * (NUM_PITCHES // 4), cfg.dense_embed)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x):
        x = x.unsqueeze(1)  # (B, 1, N, 88)
        x = torch.relu(self.bn1(self.conv1(x)))
        x = self.pool(torch.relu(self.bn2(self.conv2(x))))
        x = self.pool(torch.relu(self.bn3(self.conv3(x))))
        b, c, n, p = x.shape
        x = x.permute(0, 2, 1, 3).reshape(b, n, c * p)
        return self.drop(self.fc(x))


class AlignerModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.roll_branch = _ConvBranch(cfg)
        self.spec_branch = _ConvBranch(cfg)
        rnn_cls = nn.LSTM if cfg.rnn_cell == "lstm" else nn.GRU
        self.rnn = rnn_cls(2 * cfg.dense_embed, cfg.rnn_hidden,
                           batch_first=True, bidirectional=cfg.bidirectional)
        rnn_out = cfg.rnn_hidden * (2 if cfg.bidirectional else 1)
        self.drop = nn.Dropout(cfg.dropout)
        self.head = nn.Linear(rnn_out, NUM_PITCHES)

    def forward(self, roll, spec):
        if roll.shape != spec.shape:
            raise ValueError(f"input shapes differ: {tuple(roll.shape)} "
                             f"vs {tuple(spec.shape)}")
        if self.cfg.blind_transcription:
            roll = torch.zeros_like(roll)
        embed = torch.cat([self.roll_branch(roll), self.spec_branch(spec)], dim=-1)
        out, _ = self.rnn(embed)
        return torch.sigmoid(self.head(self.drop(out)))

    def embeddings(self, roll, spec):
        """Pre-RNN activations, exposed for shift-equivariance checks."""
        if self.cfg.blind_transcription:
            roll = torch.zeros_like(roll)
        return torch.cat([self.roll_branch(roll), self.spec_branch(spec)], dim=-1)


def _to_matrix(x) -> np.ndarray:
    if isinstance(x, PianoRoll):
        return x.frames.astype(np.float64)
    if isinstance(x, FeatureMatrix):
        return x.values
    return np.asarray(x, dtype=np.float64)


def forward(roll, spec, model: AlignerModel, training: bool = False) -> np.ndarray:
    """Run one pair through the model; training=False means eval mode."""
    r = _to_matrix(roll)
    s = _to_matrix(spec)
    if r.shape != s.shape:
        raise ValueError(f"roll {r.shape} and spectrogram {s.shape} differ; "
                         "pad them to a common length first")
    dtype = next(model.parameters()).dtype
    model.train(training)
    rt = torch.as_tensor(r, dtype=dtype).unsqueeze(0)
    st = torch.as_tensor(s, dtype=dtype).unsqueeze(0)
    with torch.set_grad_enabled(training):
        out = model(rt, st)
    return out.squeeze(0).detach().numpy().astype(np.float64)


def infer(roll, spec, weights) -> np.ndarray:
    """Eval-mode forward pass from a WeightStore or an existing model."""
    model = weights if isinstance(weights, AlignerModel) else model_from_weights(weights)
    return forward(roll, spec, model, training=False)


def bce_loss(pred, target):
    """Mean binary cross entropy with predictions clamped away from {0, 1}.

    Accepts torch tensors (differentiable) or array-likes (returns float).
    """
    if isinstance(pred, torch.Tensor):
        if pred.shape != target.shape:
            raise ValueError(f"shape mismatch: {tuple(pred.shape)} "
                             f"vs {tuple(target.shape)}")
        p = pred.clamp(1e-7, 1.0 - 1e-7)
        t = target.to(p.dtype)
        return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    p = np.clip(p, 1e-7, 1.0 - 1e-7)
    return float(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean())


def _masked_bce(pred, target, mask):
    p = pred.clamp(1e-7, 1.0 - 1e-7)
    t = target.to(p.dtype)
    cell = -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p))
    cell = cell * mask.unsqueeze(-1)
    total = mask.sum() * pred.shape[-1]
    return cell.sum() / total, float(total)


def save_weights(store: WeightStore, path) -> None:
    payload = {
        "format_version": store.format_version,
        "model_config": asdict(store.model_config),
        "tensors": {k: v.cpu() for k, v in store.tensors.items()},
    }
    torch.save(payload, path)


def load_weights(path) -> WeightStore:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise WeightLoadError(f"cannot read weight file {path}: {exc}") from exc
    for key in ("format_version", "model_config", "tensors"):
        if key not in payload:
            raise WeightLoadError(f"weight file missing field {key!r}")
    if payload["format_version"] != FORMAT_VERSION:
        raise WeightLoadError(
            f"weight format version {payload['format_version']} unsupported "
            f"(expected {FORMAT_VERSION})")
    try:
        cfg = ModelConfig(**{**payload["model_config"],
                             "conv_filters": tuple(payload["model_config"]["conv_filters"])})
    except (TypeError, ValueError) as exc:
        raise WeightLoadError(f"invalid model_config in weight file: {exc}") from exc
    store = WeightStore(cfg, payload["tensors"], payload["format_version"])
    model_from_weights(store)  # fail early if any tensor is off-shape
    return store


def model_from_weights(store: WeightStore) -> AlignerModel:
    model = AlignerModel(store.model_config)
    expected = model.state_dict()
    for name, tensor in expected.items():
        if name not in store.tensors:
            raise WeightLoadError(f"weight file missing tensor {name!r}")
        if store.tensors[name].shape != tensor.shape:
            raise WeightLoadError(
                f"tensor {name!r} has shape {tuple(store.tensors[name].shape)}, "
                f"expected {tuple(tensor.shape)}")
    model.load_state_dict(store.tensors)
    return model


def store_from_model(model: AlignerModel) -> WeightStore:
    tensors = {k: v.detach().clone().cpu() for k, v in model.state_dict().items()}
    return WeightStore(model.cfg, tensors)


def load_triplet_arrays(triplet, fps: float = 100.0):
    """(input roll, log-CQT, target roll) as equal-length float matrices."""
    seq_in = parse_midi(triplet.unaligned_midi)
    seq_ref = parse_midi(triplet.aligned_midi)
    audio = resample(load_wav(triplet.audio), 16000)
    spec = log_scale(compute_cqt(audio))
    roll_in = to_piano_roll(seq_in, fps=int(fps)).frames.astype(np.float32)
    roll_ref = to_piano_roll(seq_ref, fps=int(fps)).frames.astype(np.float32)
    sv = spec.values.astype(np.float32)
    n = max(len(roll_in), len(roll_ref), len(sv))

    def pad(x):
        return np.pad(x, ((0, n - len(x)), (0, 0))) if len(x) < n else x

    return pad(roll_in), pad(sv), pad(roll_ref)


def _as_splits(dataset):
    if isinstance(dataset, dict):
        return list(dataset.get("train", [])), list(dataset.get("valid", []))
    train = [t for t in dataset if t.split == "train"]
    valid = [t for t in dataset if t.split == "valid"]
    return train, valid


def _prepare(example, crop: int):
    if isinstance(example, tuple):
        roll, spec, target = (np.asarray(x, dtype=np.float32) for x in example)
    else:
        roll, spec, target = load_triplet_arrays(example)
    return roll[:crop], spec[:crop], target[:crop]


def _collate(examples, idxs, dtype=torch.float32):
    n = max(len(examples[i][0]) for i in idxs)
    b = len(idxs)
    roll = torch.zeros(b, n, NUM_PITCHES, dtype=dtype)
    spec = torch.zeros(b, n, NUM_PITCHES, dtype=dtype)
    target = torch.zeros(b, n, NUM_PITCHES, dtype=dtype)
    mask = torch.zeros(b, n, dtype=dtype)
    for row, i in enumerate(idxs):
        r, s, t = examples[i]
        roll[row, :len(r)] = torch.as_tensor(r, dtype=dtype)
        spec[row, :len(s)] = torch.as_tensor(s, dtype=dtype)
        target[row, :len(t)] = torch.as_tensor(t, dtype=dtype)
        mask[row, :len(r)] = 1.0
    return roll, spec, target, mask


def _epoch_loss(model, examples, tcfg, optimizer=None, generator=None):
    training = optimizer is not None
    model.train(training)
    if training:
        order = torch.randperm(len(examples), generator=generator).tolist()
    else:
        order = list(range(len(examples)))
    loss_sum = 0.0
    cell_count = 0.0
    for start in range(0, len(order), tcfg.batch_size):
        idxs = order[start:start + tcfg.batch_size]
        roll, spec, target, mask = _collate(examples, idxs)
        with torch.set_grad_enabled(training):
            pred = model(roll, spec)
            loss, cells = _masked_bce(pred, target, mask)
        if training:
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        loss_sum += float(loss.detach()) * cells
        cell_count += cells
    return loss_sum / cell_count


def train(dataset, mcfg: ModelConfig, tcfg: TrainConfig,
          log_path=None) -> tuple[WeightStore, list[tuple[int, float, float]]]:
    """Fit the aligner; returns best-validation weights and the epoch log.

    `dataset` is either a list of split-annotated triplets or a dict with
    "train"/"valid" lists of (roll, spectrogram, target) arrays. Runs are
    reproducible for a fixed tcfg.seed on a single-threaded setup.
    """
    train_items, valid_items = _as_splits(dataset)
    if not train_items or not valid_items:
        raise ValueError("both train and valid splits must be non-empty")
    torch.manual_seed(tcfg.seed)
    model = AlignerModel(mcfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=tcfg.lr, betas=(0.9, 0.999))
    generator = torch.Generator().manual_seed(tcfg.seed)

    train_ex = [_prepare(e, tcfg.sequence_crop) for e in train_items]
    valid_ex = [_prepare(e, tcfg.sequence_crop) for e in valid_items]

    log = []
    best_loss = float("inf")
    best_state = None
    best_epoch = 0
    for epoch in range(1, tcfg.max_epochs + 1):
        train_loss = _epoch_loss(model, train_ex, tcfg, optimizer, generator)
        valid_loss = _epoch_loss(model, valid_ex, tcfg)
        log.append((epoch, train_loss, valid_loss))
        logger.info("epoch %d: train %.5f valid %.5f", epoch, train_loss, valid_loss)
        if not (np.isfinite(train_loss) and np.isfinite(valid_loss)):
            raise TrainingError(f"loss diverged (NaN/inf) at epoch {epoch}")
        if valid_loss < best_loss:
            best_loss = valid_loss
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if epoch >= tcfg.min_epochs and epoch - best_epoch >= tcfg.patience:
            logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    if log_path is not None:
        write_training_log(log, log_path)
    return WeightStore(mcfg, best_state), log


def write_training_log(log, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "valid_loss"])
        for epoch, train_loss, valid_loss in log:
            writer.writerow([epoch, f"{train_loss:.6f}", f"{valid_loss:.6f}"])
