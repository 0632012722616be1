"""Losses, AdamW, and the mini-batch training loop with early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, NumericError
from .model import TrajectoryModel

logger = logging.getLogger(__name__)

LOG_COLUMNS = [
    "epoch",
    "train_loss",
    "val_loss",
    "val_ape_1h",
    "val_ape_2h",
    "val_ape_3h",
    "val_ade",
    "wall_seconds",
]


# -- losses -----------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def nll_terms(mean: Tensor, head: Tensor, target) -> Tensor:
    """Per-step Gaussian NLL, shape (..., h), via the Cholesky factor.

    With B = [[b11, 0], [b21, b22]] the residual is whitened by forward
    substitution and ln|Sigma| = 2 (log b11 + log b22) is read off the head.
    """
    target = _as_tensor(target)
    if mean.shape != target.shape or head.shape[:-1] != mean.shape[:-1] or head.shape[-1] != 3:
        raise ContractError(
            f"nll: mean {list(mean.shape)}, head {list(head.shape)}, target {list(target.shape)} disagree"
        )
    r = ag.sub(target, mean)
    r1, r2 = ag.slice_(r, 0, 1), ag.slice_(r, 1, 2)
    log_b11, log_b22, b21 = ag.slice_(head, 0, 1), ag.slice_(head, 1, 2), ag.slice_(head, 2, 3)
    u1 = ag.mul(r1, ag.exp(ag.scale(log_b11, -1.0)))
    u2 = ag.mul(ag.sub(r2, ag.mul(b21, u1)), ag.exp(ag.scale(log_b22, -1.0)))
    quad = ag.scale(ag.add(ag.mul(u1, u1), ag.mul(u2, u2)), 0.5)
    per_step = ag.add(quad, ag.add(log_b11, log_b22))
    return ag.reshape(per_step, per_step.shape[:-1])


def nll_loss(mean: Tensor, head: Tensor, target) -> Tensor:
    """Sum over steps of the Gaussian NLL, averaged over sequences.

    ``mean`` is (h, 2) or (B, h, 2); ``head`` holds (log b11, log b22, b21).
    """
    terms = nll_terms(mean, head, target)
    if terms.data.ndim <= 1:
        return ag.sum_(terms)
    return ag.scale(ag.sum_(terms), 1.0 / terms.shape[0])


def mae_loss(mean: Tensor, target) -> Tensor:
    """Mean absolute error over sequences, steps and coordinates."""
    target = _as_tensor(target)
    if mean.shape != target.shape:
        raise ContractError(f"mae: prediction {list(mean.shape)} vs target {list(target.shape)}")
    return ag.mean(ag.abs_(ag.sub(target, mean)))


# -- optimizer --------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> None:
    """One AdamW update in place; weight decay is applied to the weights directly."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif state.m[name].shape != p.shape:
            raise ContractError(f"optimizer moments for {name} have the wrong shape")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


# -- training loop ----------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 200
    patience: int = 3000
    max_epochs: int = 10000
    loss: Literal["nll", "mae"] = "nll"
    grad_clip: float = 5.0
    teacher_forcing: float = 0.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.loss not in ("nll", "mae"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.lr < 0 or self.weight_decay < 0 or self.batch_size < 1 or self.patience < 0:
            raise ConfigError(f"invalid training configuration: {self}")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be at least 1")
        if not 0.0 <= self.teacher_forcing <= 1.0:
            raise ConfigError("teacher_forcing must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


COVARIANCE_HEAD = ("head_sigma.W", "head_sigma.b")


def trainable_names(model: TrajectoryModel, loss: str) -> list[str]:
    names = list(model.params)
    if loss == "mae":
        names = [n for n in names if n not in COVARIANCE_HEAD]
    return names


def batch_loss(
    model: TrajectoryModel,
    x: np.ndarray,
    y: np.ndarray,
    psi: np.ndarray | None,
    loss: str,
    mode: str,
    rng,
    teacher_forcing: float = 0.0,
) -> Tensor:
    out = model.forward(x, psi, mode=mode, rng=rng, targets=y, teacher_forcing=teacher_forcing)
    mean, head = out.stacked()
    if loss == "nll":
        return nll_loss(mean, head, y)
    return mae_loss(mean, y)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_ape_1h: float
    val_ape_2h: float
    val_ape_3h: float
    val_ade: float
    wall_seconds: float

    def row(self) -> list:
        return [getattr(self, c) for c in LOG_COLUMNS]


@dataclass
class TrainResult:
    model: TrajectoryModel
    best_params: dict[str, np.ndarray]
    best_val_loss: float
    best_epoch: int
    epoch: int
    log: list[EpochRecord]
    optimizer: OptimizerState
    stopped_early: bool


def _format(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_log(path: Path | str, records: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow([_format(v) for v in r.row()])


def _run_epoch(model, train_set, val_set, psi_train, psi_val, names, config, opt, rng, epoch):
    order = rng.permutation(len(train_set))
    total, count = 0.0, 0
    for lo in range(0, len(order), config.batch_size):
        idx = order[lo : lo + config.batch_size]
        psi = psi_train[idx] if psi_train is not None else None
        for n in names:
            model.params[n].grad = None
        with ag.Tape() as tape:
            loss = batch_loss(
                model, train_set.x[idx], train_set.y[idx], psi, config.loss, "train", rng, config.teacher_forcing
            )
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"training loss diverged at epoch {epoch}")
        tape.backward(loss)
        grads = {
            n: (model.params[n].grad if model.params[n].grad is not None else np.zeros(model.params[n].shape))
            for n in names
        }
        clip_gradients(grads, config.grad_clip)
        adamw_step(model.params, grads, opt)
        total += value * len(idx)
        count += len(idx)
    val_loss = validation_loss(model, val_set, psi_val, config.loss)
    if not math.isfinite(val_loss):
        raise NumericError(f"validation loss diverged at epoch {epoch}")
    return total / count, val_loss


def train(
    model: TrajectoryModel,
    train_set,
    val_set,
    config: TrainConfig,
    evaluate_val: Callable[[TrajectoryModel], dict] | None = None,
    log_path: Path | str | None = None,
    on_divergence: Callable[[dict[str, np.ndarray], int], None] | None = None,
    optimizer: OptimizerState | None = None,
    start_epoch: int = 0,
    best_val_loss: float = math.inf,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Mini-batch training with per-epoch validation and patience-based stopping.

    ``train_set``/``val_set`` expose ``x``, ``y`` and ``psi_onehot(v)``.
    Validation uses the deterministic (no-dropout) pass. ``evaluate_val``
    returns the APE/ADE fields of the log row.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ContractError("training needs non-empty train and validation splits")
    cfg = model.config
    rng = np.random.default_rng([config.seed, start_epoch])
    names = trainable_names(model, config.loss)
    opt = optimizer or OptimizerState(
        config.lr, config.weight_decay, config.beta1, config.beta2, config.eps
    )
    opt.lr, opt.weight_decay = config.lr, config.weight_decay
    v = cfg.n_intents
    psi_train = train_set.psi_onehot(v) if cfg.labeled else None
    psi_val = val_set.psi_onehot(v) if cfg.labeled else None

    best = {k: t.data.copy() for k, t in model.params.items()}
    best_epoch = start_epoch
    since_best = 0
    records: list[EpochRecord] = []
    t0 = time.perf_counter()
    stopped = False
    epoch = start_epoch
    for epoch in range(start_epoch + 1, start_epoch + config.max_epochs + 1):
        try:
            train_loss, val_loss = _run_epoch(
                model, train_set, val_set, psi_train, psi_val, names, config, opt, rng, epoch
            )
        except NumericError:
            if on_divergence is not None:
                on_divergence(best, epoch)
            raise
        extra = evaluate_val(model) if evaluate_val is not None else {}
        rec = EpochRecord(
            epoch,
            train_loss,
            val_loss,
            extra.get("val_ape_1h", math.nan),
            extra.get("val_ape_2h", math.nan),
            extra.get("val_ape_3h", math.nan),
            extra.get("val_ade", math.nan),
            round(time.perf_counter() - t0, 3),
        )
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if val_loss < best_val_loss:
            best_val_loss = val_loss
            best_epoch = epoch
            best = {k: t.data.copy() for k, t in model.params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best > config.patience:
                stopped = True
                break
        if log_path is not None and epoch % 50 == 0:
            write_log(log_path, records)
    if log_path is not None:
        write_log(log_path, records)
    for k, arr in best.items():
        model.params[k].data[...] = arr
    logger.info("training stopped at epoch %d, best epoch %d (val %.5f)", epoch, best_epoch, best_val_loss)
    return TrainResult(model, best, best_val_loss, best_epoch, epoch, records, opt, stopped)


def validation_loss(model: TrajectoryModel, data, psi: np.ndarray | None, loss: str, chunk: int = 2000) -> float:
    total = 0.0
    for lo in range(0, len(data), chunk):
        sl = slice(lo, lo + chunk)
        value = batch_loss(
            model, data.x[sl], data.y[sl], None if psi is None else psi[sl], loss, "deterministic", None
        ).item()
        total += value * len(data.x[sl])
    return total / len(data)
