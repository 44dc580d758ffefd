"""Adam training with sliding windows, orthogonal penalty and early stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .backbone import DprNetModel, model_forward
from .data import Scaler, SeriesFrame, split
from .errors import ConfigError, DimensionError, NumericError

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,train_loss,val_mse,orth_penalty"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    patience: int = 10
    max_epochs: int = 100
    lambda_orth: float = 1e-4
    seed: int = 0
    grad_clip: float | None = None
    train_mse_target: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.lambda_orth < 0:
            raise ConfigError(f"lambda_orth must be >= 0, got {self.lambda_orth}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be > 0 when set, got {self.grad_clip}")


# --------------------------------------------------------------------------- loss / metrics


def total_loss(pred: Tensor, target, penalty, lambda_orth: float) -> Tensor:
    """MSE over all elements plus ``lambda_orth * penalty``."""
    target = ad.as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    resid = pred - target
    loss = ad.tmean(resid * resid)
    if lambda_orth:
        loss = loss + ad.as_tensor(penalty, like=pred) * lambda_orth
    return loss


def mse_mae(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    err = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


# --------------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``."""
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# --------------------------------------------------------------------------- windows


class WindowSampler:
    """Stride-1 (lookback, horizon) windows within one contiguous split."""

    def __init__(self, values: np.ndarray, lookback: int, horizon: int):
        self.values = np.asarray(values, dtype=np.float64)
        self.lookback = lookback
        self.horizon = horizon
        self.n_windows = self.values.shape[0] - lookback - horizon + 1
        if self.n_windows < 1:
            raise ConfigError(
                f"split of length {self.values.shape[0]} is shorter than lookback+horizon={lookback + horizon}"
            )
        self._past = np.arange(lookback)
        self._future = np.arange(lookback, lookback + horizon)

    def __len__(self) -> int:
        return self.n_windows

    def batch(self, starts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        starts = np.asarray(starts)[:, None]
        return self.values[starts + self._past], self.values[starts + self._future]

    def batches(self, batch_size: int, order: np.ndarray | None = None):
        order = np.arange(self.n_windows) if order is None else order
        for i in range(0, len(order), batch_size):
            yield self.batch(order[i : i + batch_size])


@dataclass
class DataSplits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    scaler: Scaler

    @classmethod
    def from_frame(cls, frame: SeriesFrame, ratios) -> "DataSplits":
        train, val, test = split(frame, ratios)
        scaler = Scaler.fit(train.values)
        return cls(scaler.transform(train.values), scaler.transform(val.values), scaler.transform(test.values), scaler)

    def get(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


# --------------------------------------------------------------------------- evaluation


def predict(model: DprNetModel, x: np.ndarray) -> np.ndarray:
    with ad.no_tape():
        y, _ = model_forward(x, model)
    return y.data


def evaluate(model: DprNetModel, values: np.ndarray, batch_size: int = 256) -> tuple[float, float]:
    """(MSE, MAE) averaged over every window and element of a standardized split."""
    cfg = model.config
    sampler = WindowSampler(values, cfg.lookback, cfg.horizon)
    sq = ab = 0.0
    count = 0
    for x, y in sampler.batches(batch_size):
        err = predict(model, x) - y
        sq += float(np.sum(err * err))
        ab += float(np.sum(np.abs(err)))
        count += err.size
    return sq / count, ab / count


def penalty_value(model: DprNetModel) -> float:
    from .adapter import orth_penalty

    with ad.no_tape():
        return float(sum(orth_penalty(b.adapter.M).data for b in model.blocks if b.adapter is not None))


# --------------------------------------------------------------------------- training loop


class EarlyStopping:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if val < self.best:
            self.best, self.best_epoch, self.bad_epochs = val, epoch, 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float
    orth_penalty: float
    train_mse: float | None = None

    def csv(self) -> str:
        return f"{self.epoch},{self.train_loss!r},{self.val_mse!r},{self.orth_penalty!r}"


@dataclass
class TrainResult:
    model: DprNetModel
    history: list[EpochRecord]
    best_epoch: int
    best_val_mse: float


def train(
    model: DprNetModel,
    splits: DataSplits,
    config: TrainConfig,
    log_file: TextIO | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    cfg = model.config
    if splits.train.shape[1] != cfg.channels:
        raise ConfigError(f"channel axis: data has {splits.train.shape[1]} channels, model expects {cfg.channels}")
    for name in ("train", "val"):
        if splits.get(name).shape[0] == 0:
            raise ConfigError(f"{name} split is empty")
    train_windows = WindowSampler(splits.train, cfg.lookback, cfg.horizon)
    WindowSampler(splits.val, cfg.lookback, cfg.horizon)

    params = model.named_parameters()
    state = AdamState()
    stopper = EarlyStopping(config.patience)
    history: list[EpochRecord] = []
    best_state = model.state_dict()
    if log_file is not None:
        log_file.write(LOG_HEADER + "\n")

    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train_windows))
        loss_sum = 0.0
        for x, y in train_windows.batches(config.batch_size, order):
            model.zero_grad()
            with Tape() as tape:
                pred, penalty = model_forward(x, model, rng=rng)
                loss = total_loss(pred, y, penalty, config.lambda_orth)
            ad.backward(loss, tape)
            if config.grad_clip is not None:
                clip_grad_norm(params, config.grad_clip)
            adam_step(params, state, config.lr)
            loss_sum += float(loss.data) * x.shape[0]

        val_mse, _ = evaluate(model, splits.val)
        record = EpochRecord(epoch, loss_sum / len(train_windows), val_mse, penalty_value(model))
        if config.train_mse_target is not None:
            record.train_mse = evaluate(model, splits.train)[0]
        history.append(record)
        if log_file is not None:
            log_file.write(record.csv() + "\n")
            log_file.flush()
        log.info("epoch %d train_loss=%.6f val_mse=%.6f", epoch, record.train_loss, val_mse)
        if on_epoch is not None:
            on_epoch(record)

        improved, stop = stopper.update(epoch, val_mse)
        if improved:
            best_state = model.state_dict()
        if config.train_mse_target is not None and record.train_mse < config.train_mse_target:
            break
        if stop:
            break

    best = model.copy()
    best.load_state_dict(best_state)
    return TrainResult(best, history, stopper.best_epoch, stopper.best)
