"""Losses, the AdamW optimizer and the early-stopping training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, DegenerateError, DimensionError, NumericError
from .functional import log_softmax_lastdim
from .rng import Rng
from .tensor import Tensor, exp, no_grad, power

log = logging.getLogger(__name__)

LOSSES = ("focal", "mse", "masked_mse")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    seed: int = 0
    loss: str = "mse"
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not all(0 < b < 1 for b in self.betas):
            raise ConfigError(f"betas must lie in (0, 1), got {self.betas}")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("patience, batch_size and max_epochs must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.focal_gamma < 0 or not 0 < self.focal_alpha <= 1:
            raise ConfigError("focal loss needs gamma >= 0 and 0 < alpha <= 1")
        return self


# --------------------------------------------------------------------- losses
def _target_tensor(target, like: Tensor) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != like.shape:
        raise DimensionError(f"prediction shape {like.shape} != target shape {t.shape}")
    return t.astype(like.dtype, copy=False)


def _pick(logits: Tensor, targets) -> tuple[np.ndarray, int]:
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    B, C = logits.shape
    if C < 2:
        raise ConfigError("classification needs at least 2 classes")
    if len(targets) != B:
        raise DimensionError(f"{len(targets)} targets for a batch of {B}")
    if targets.size and (targets.max() >= C or targets.min() < 0):
        raise IndexError(f"target id {int(targets.max())} out of range for {C} classes")
    return targets, B


def cross_entropy(logits: Tensor, targets) -> Tensor:
    targets, B = _pick(logits, targets)
    return -log_softmax_lastdim(logits)[np.arange(B), targets].mean()


def focal_loss(logits: Tensor, targets, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Batch mean of ``-alpha * (1 - p_t)**gamma * log p_t``, via log-softmax."""
    if gamma < 0 or not 0 < alpha <= 1:
        raise ConfigError("focal loss needs gamma >= 0 and 0 < alpha <= 1")
    targets, B = _pick(logits, targets)
    logp = log_softmax_lastdim(logits)[np.arange(B), targets]
    if gamma == 0:
        return -(logp.mean()) * alpha
    weight = power(1.0 - exp(logp), gamma)
    return -(weight * logp).mean() * alpha


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = pred - _target_tensor(target, pred)
    return (diff * diff).mean()


def mae_metric(pred, target) -> float:
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if p.shape != t.shape:
        raise DimensionError(f"prediction shape {p.shape} != target shape {t.shape}")
    return float(np.abs(p - t).mean())


def masked_mse_loss(pred: Tensor, target, mask) -> Tensor:
    """Mean squared error over the cells where ``mask == 1`` only."""
    m = np.asarray(mask, dtype=pred.dtype)
    if m.shape != pred.shape:
        raise DimensionError(f"mask shape {m.shape} != prediction shape {pred.shape}")
    n = m.sum()
    if n < 1:
        raise DegenerateError("masked_mse_loss: mask selects no elements")
    t = _target_tensor(target, pred) * m
    diff = pred * m - t
    return (diff * diff).sum() * (1.0 / n)


# ------------------------------------------------------------------ optimizer
@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, state: OptimizerState, cfg: TrainConfig) -> None:
    """One AdamW update using ``p.grad`` of every parameter in ``params``.

    Weight decay is decoupled: ``p <- p - lr * wd * p`` before the Adam step.
    """
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in parameter {name!r} at step {state.step + 1}")
    state.step += 1
    b1, b2 = cfg.betas
    lr, wd = cfg.learning_rate, cfg.weight_decay
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        data = p.data * (1.0 - lr * wd) if wd else p.data
        p.data = (data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------- loop
Objective = Callable[[object, tuple, bool, Rng], Tensor]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "train_loss": self.train_loss,
                           "val_loss": self.val_loss, "seconds": round(self.seconds, 6)})


def _batches(n: int, size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start:start + size]


def evaluate_loss(model, data: Sequence[np.ndarray], objective: Objective, batch_size: int, rng: Rng) -> float:
    total, count = 0.0, 0
    with no_grad():
        for idx in _batches(len(data[0]), batch_size):
            batch = tuple(a[idx] for a in data)
            total += objective(model, batch, False, rng).item() * len(idx)
            count += len(idx)
    return total / count


def fit(model, train_set: Sequence[np.ndarray], val_set: Sequence[np.ndarray], cfg: TrainConfig,
        objective: Objective, on_epoch: Callable[[EpochRecord], None] | None = None):
    """Mini-batch AdamW with early stopping on validation loss.

    ``train_set``/``val_set`` are tuples of arrays sharing their first axis;
    ``objective(model, batch, train, rng)`` returns a scalar loss tensor.
    The model is left holding the best weights, which are also returned
    (as a state snapshot) with the per-epoch history.
    """
    cfg.validate()
    if len(train_set[0]) == 0 or len(val_set[0]) == 0:
        raise DataError("fit needs non-empty train and validation sets")
    root = Rng(cfg.seed)
    shuffle_rng, drop_rng = root.child("shuffle"), root.child("dropout")
    state = OptimizerState()
    history: list[EpochRecord] = []
    best_val, best_state, stale = np.inf, model.snapshot(), 0
    n = len(train_set[0])
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        for idx in _batches(n, cfg.batch_size, shuffle_rng.permutation(n)):
            batch = tuple(a[idx] for a in train_set)
            model.zero_grad()
            loss = objective(model, batch, True, drop_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            adamw_step(model.params, state, cfg)
            total += value * len(idx)
        val = evaluate_loss(model, val_set, objective, cfg.batch_size, root.child("val"))
        rec = EpochRecord(epoch, total / n, val, time.perf_counter() - t0)
        history.append(rec)
        log.debug("epoch %d train %.6f val %.6f", epoch, rec.train_loss, val)
        if on_epoch:
            on_epoch(rec)
        if val < best_val:
            best_val, best_state, stale = val, model.snapshot(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state(best_state)
    return best_state, history
