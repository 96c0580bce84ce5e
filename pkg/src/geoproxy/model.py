"""The convolutional regressor family: a small residual feature extractor
with a replaceable linear head, its training loop, and a finite-difference
gradient checker.

The extractor is stem conv -> residual stages -> global average pool ->
linear embedding (ReLU). ``embed`` returns the post-ReLU embedding, and
``forward`` is exactly ``head @ embed + bias``, so heads can be swapped for
transfer without touching extractor weights.

Training is Adam on mean squared error with an 8:2 train/validation split
(stratified by state when group labels are supplied), early stopping on
validation loss, and parameters restored from the best epoch. With a fixed
seed and thread count the whole loop is bit-reproducible.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .containers import read_checkpoint, write_checkpoint
from .errors import InputError, SchemaError, TrainingDiverged

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConvRegressorConfig:
    input_hw: tuple[int, int] = (224, 224)
    in_channels: int = 3
    block_widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    stem_kernel: int = 7
    stem_stride: int = 4
    embedding_dim: int = 512
    output_dim: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.embedding_dim <= 0 or self.output_dim <= 0:
            raise SchemaError("embedding and output dims must be positive")
        if not self.block_widths:
            raise SchemaError("need at least one stage")
        if self.blocks_per_stage < 1:
            raise SchemaError("blocks_per_stage must be >= 1")
        object.__setattr__(self, "input_hw", tuple(self.input_hw))
        object.__setattr__(self, "block_widths", tuple(int(w) for w in self.block_widths))

    def to_dict(self) -> dict:
        return {
            "input_hw": list(self.input_hw),
            "in_channels": self.in_channels,
            "block_widths": list(self.block_widths),
            "blocks_per_stage": self.blocks_per_stage,
            "stem_kernel": self.stem_kernel,
            "stem_stride": self.stem_stride,
            "embedding_dim": self.embedding_dim,
            "output_dim": self.output_dim,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConvRegressorConfig":
        d = dict(d)
        d["input_hw"] = tuple(d["input_hw"])
        d["block_widths"] = tuple(d["block_widths"])
        return cls(**d)


@dataclass(frozen=True)
class TrainSpec:
    learning_rate: float = 1e-3
    batch_size: int = 64
    split: tuple[float, float] = (0.8, 0.2)
    max_epochs: int = 30
    seed: int = 0
    loss: str = "mse"
    patience: int = 5

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size <= 0:
            raise SchemaError("learning rate and batch size must be positive")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise SchemaError("split fractions must sum to 1")
        if self.loss != "mse":
            raise SchemaError(f"unsupported loss {self.loss!r}")
        object.__setattr__(self, "split", tuple(self.split))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d


class ConvRegressor:
    """Residual CNN regressor; callable on (N, C, H, W) float batches."""

    def __init__(self, config: ConvRegressorConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(config.seed)
        widths = config.block_widths
        self.stem = nn.Conv2d("stem", config.in_channels, widths[0], config.stem_kernel,
                              config.stem_stride, config.stem_kernel // 2, rng, dtype)
        self.stem_relu = nn.ReLU()
        self.blocks: list[nn.ResidualBlock] = []
        prev = widths[0]
        for si, width in enumerate(widths):
            for bi in range(config.blocks_per_stage):
                stride = 2 if (si > 0 and bi == 0) else 1
                self.blocks.append(nn.ResidualBlock(
                    f"stage{si}.block{bi}", prev, width, stride, rng, dtype))
                prev = width
        self.pool = nn.GlobalAvgPool()
        self.embed_layer = nn.Linear("embed", prev, config.embedding_dim, rng, dtype)
        self.embed_relu = nn.ReLU()
        self.head = nn.Linear("head", config.embedding_dim, config.output_dim, rng, dtype)

    # -- plumbing ---------------------------------------------------------

    def params(self) -> dict[str, nn.Param]:
        out: dict[str, nn.Param] = {}
        for p in self.stem.params():
            out[p.name] = p
        for block in self.blocks:
            for p in block.params():
                out[p.name] = p
        for p in self.embed_layer.params() + self.head.params():
            out[p.name] = p
        return out

    def zero_grads(self) -> None:
        for p in self.params().values():
            p.grad[...] = 0

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params().items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = set(params) - set(arrays)
        if missing:
            raise SchemaError(f"checkpoint missing parameters {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=self.dtype)
            if arr.shape != p.value.shape:
                raise SchemaError(f"{name}: shape {arr.shape} != expected {p.value.shape}")
            p.value[...] = arr

    # -- inference --------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        expected = (self.config.in_channels, *self.config.input_hw)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise SchemaError(f"input shape {x.shape} != (N, {expected})")
        return x

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Penultimate activations feeding the head: (N, embedding_dim)."""
        h = self._check_input(x)
        h = self.stem_relu.forward(self.stem.forward(h))
        for block in self.blocks:
            h = block.forward(h)
        h = self.pool.forward(h)
        return self.embed_relu.forward(self.embed_layer.forward(h))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.head.forward(self.embed(x))

    __call__ = forward

    def embed_batched(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return np.concatenate([self.embed(x[i:i + batch_size])
                               for i in range(0, len(x), batch_size)])

    def predict_batched(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return np.concatenate([self.forward(x[i:i + batch_size])
                               for i in range(0, len(x), batch_size)])

    # -- training ---------------------------------------------------------

    def forward_backward(self, x: np.ndarray, y: np.ndarray) -> float:
        """One MSE forward/backward pass; gradients accumulate into params."""
        pred = self.forward(x)
        diff = (pred - y.astype(pred.dtype))
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        dpred = (2.0 / diff.size) * diff
        d = self.head.backward(dpred)
        d = self.embed_layer.backward(self.embed_relu.backward(d))
        d = self.pool.backward(d)
        for block in reversed(self.blocks):
            d = block.backward(d)
        self.stem.backward(self.stem_relu.backward(d))
        return loss

    def replace_head(self, new_output_dim: int, seed: int) -> "ConvRegressor":
        """New model with identical extractor weights and a fresh head.

        The head is re-initialized from seeded uniform(-1/sqrt(E), 1/sqrt(E)).
        """
        if new_output_dim <= 0:
            raise SchemaError("output dim must be positive")
        cfg = ConvRegressorConfig(**{**self.config.to_dict(), "output_dim": new_output_dim,
                                     "seed": self.config.seed})
        cfg = ConvRegressorConfig.from_dict(cfg.to_dict())
        other = ConvRegressor(cfg, dtype=self.dtype)
        arrays = self.param_arrays()
        rng = np.random.default_rng(seed)
        e = self.config.embedding_dim
        arrays["head.w"] = nn.linear_uniform(rng, (new_output_dim, e), e, self.dtype)
        arrays["head.b"] = nn.linear_uniform(rng, (new_output_dim,), e, self.dtype)
        other.load_param_arrays(arrays)
        return other


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_mse: float
    val_mse: float


@dataclass(frozen=True)
class TrainResult:
    history: tuple[EpochStats, ...]
    best_epoch: int
    best_val_mse: float
    train_idx: np.ndarray
    val_idx: np.ndarray
    beats_mean_baseline: bool


def split_indices(
    n: int,
    val_fraction: float,
    seed: int,
    groups: Sequence | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded 8:2-style split; stratified per group when labels are given."""
    rng = np.random.default_rng(seed)
    if groups is None:
        order = rng.permutation(n)
        n_val = int(round(n * val_fraction))
        return np.sort(order[n_val:]), np.sort(order[:n_val])
    groups = np.asarray(groups)
    train_parts, val_parts = [], []
    for g in sorted(set(groups.tolist())):
        idx = np.flatnonzero(groups == g)
        order = idx[rng.permutation(len(idx))]
        n_val = int(round(len(idx) * val_fraction))
        val_parts.append(order[:n_val])
        train_parts.append(order[n_val:])
    return np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(val_parts))


def _batched_mse(model: ConvRegressor, x: np.ndarray, y: np.ndarray, batch_size: int) -> float:
    total = 0.0
    for i in range(0, len(x), batch_size):
        pred = model.forward(x[i:i + batch_size])
        total += float(np.sum((pred.astype(np.float64) - y[i:i + batch_size]) ** 2))
    return total / y.size


def train(
    model: ConvRegressor,
    x: np.ndarray,
    y: np.ndarray,
    spec: TrainSpec,
    groups: Sequence | None = None,
    split: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainResult:
    """Adam/MSE training with early stopping; model ends at the best epoch.

    ``split`` overrides the internal seeded split; the pipeline passes the
    split it already used to compute train-only band statistics, so
    normalization never leaks validation pixels.
    """
    if len(x) == 0 or len(x) != len(y):
        raise InputError("dataset must be nonempty with matched inputs/targets")
    if not np.all(np.isfinite(y)):
        raise InputError("targets must be finite")
    if split is None:
        train_idx, val_idx = split_indices(len(x), spec.split[1], spec.seed, groups)
    else:
        train_idx, val_idx = (np.asarray(s) for s in split)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise InputError("both split sides must be nonempty")

    rng = np.random.default_rng(spec.seed + 1)
    opt = nn.Adam(list(model.params().values()), lr=spec.learning_rate)
    best_arrays = model.param_arrays()
    best_val = np.inf
    best_epoch = -1
    history: list[EpochStats] = []
    since_best = 0
    y64 = y.astype(np.float64)
    for epoch in range(spec.max_epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        running = 0.0
        for bi, start in enumerate(range(0, len(order), spec.batch_size)):
            batch = order[start:start + spec.batch_size]
            opt.zero_grad()
            loss = model.forward_backward(x[batch], y[batch])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}")
            opt.step()
            running += loss * len(batch)
        train_mse = running / len(order)
        val_mse = _batched_mse(model, x[val_idx], y64[val_idx], spec.batch_size)
        history.append(EpochStats(epoch, train_mse, val_mse))
        log.info("epoch %d: train_mse=%.6f val_mse=%.6f", epoch, train_mse, val_mse)
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_arrays = model.param_arrays()
            since_best = 0
        else:
            since_best += 1
            if since_best >= spec.patience:
                break
    model.load_param_arrays(best_arrays)
    mean_pred = y64[train_idx].mean(axis=0)
    baseline = float(np.mean((y64[val_idx] - mean_pred) ** 2))
    beats = best_val <= baseline
    if not beats:
        log.warning("trained model (val MSE %.6f) does not beat the mean predictor (%.6f); "
                    "run flagged failed", best_val, baseline)
    return TrainResult(
        history=tuple(history),
        best_epoch=best_epoch,
        best_val_mse=best_val,
        train_idx=train_idx,
        val_idx=val_idx,
        beats_mean_baseline=beats,
    )


def grad_check(
    model: ConvRegressor,
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float = 1e-4,
    entries_per_param: int = 4,
    seed: int = 0,
) -> float:
    """Max relative error of analytic vs central finite-difference gradients.

    Runs on a float64 copy of the model so the differences are not drowned
    by single-precision rounding; intended for tiny test-scale configs.
    """
    probe = ConvRegressor(model.config, dtype=np.float64)
    probe.load_param_arrays({k: v.astype(np.float64) for k, v in model.param_arrays().items()})
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    probe.zero_grads()
    probe.forward_backward(x, y)
    analytic = {name: p.grad.copy() for name, p in probe.params().items()}

    def loss_at() -> float:
        pred = probe.forward(x)
        return float(np.mean((pred - y) ** 2))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in probe.params().items():
        flat = p.value.ravel()
        n_entries = min(entries_per_param, flat.size)
        picks = rng.choice(flat.size, size=n_entries, replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + epsilon
            up = loss_at()
            flat[idx] = orig - epsilon
            down = loss_at()
            flat[idx] = orig
            fd = (up - down) / (2 * epsilon)
            an = float(analytic[name].ravel()[idx])
            denom = max(abs(fd), abs(an))
            if denom < 1e-12:
                continue
            worst = max(worst, abs(fd - an) / denom)
    return worst


# -- persistence ------------------------------------------------------------

def save_model(path: str | Path, model: ConvRegressor,
               train_spec: TrainSpec | None = None,
               extra_config: dict | None = None) -> Path:
    config = {"model": model.config.to_dict()}
    if extra_config:
        config.update(extra_config)
    return write_checkpoint(path, model.param_arrays(), config,
                            train_spec.to_dict() if train_spec else None)


def load_model(path: str | Path) -> tuple[ConvRegressor, dict]:
    arrays, config, _spec = read_checkpoint(path)
    model = ConvRegressor(ConvRegressorConfig.from_dict(config["model"]))
    model.load_param_arrays(arrays)
    return model, config
