"""Tied-weight LSTM cell with variational dropout and the bidirectional encoder.

All tensors are batched along the first axis: one row per sequence. Masks
are drawn per row once per forward pass and reused at every time step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError


@dataclass
class LstmWeights:
    """Stacked gate weights, rows ordered [i; f; o; g], shape (4p, d+p)."""

    W: Tensor
    b: Tensor

    def __post_init__(self):
        rows, cols = self.W.shape
        if rows % 4 or rows == 0 or cols <= rows // 4 or self.b.shape != (rows,):
            raise DimensionError(
                f"LSTM weights {list(self.W.shape)} / bias {list(self.b.shape)} are not (4p, d+p) / (4p,)"
            )

    @property
    def p(self) -> int:
        return self.W.shape[0] // 4

    @property
    def d(self) -> int:
        return self.W.shape[1] - self.p

    @classmethod
    def init(
        cls,
        d: int,
        p: int,
        rng: np.random.Generator,
        forget_bias: float = 1.0,
        name: str = "lstm",
    ) -> "LstmWeights":
        if d <= 0 or p <= 0:
            raise DimensionError(f"LSTM extents must be positive, got d={d}, p={p}")
        bound = 1.0 / np.sqrt(d + p)
        W = rng.uniform(-bound, bound, size=(4 * p, d + p))
        b = np.zeros(4 * p)
        b[p : 2 * p] = forget_bias
        return cls(ag.parameter(W, f"{name}.W"), ag.parameter(b, f"{name}.b"))


@dataclass
class VariationalMasks:
    """Inverted-dropout masks for one pass: kept entries are 1/(1-rate)."""

    d_x: np.ndarray | None  # (B, d); None means all ones
    d_h: np.ndarray  # (B, p)
    rate: float
    seed: int | None = None

    @property
    def batch(self) -> int:
        return self.d_h.shape[0]

    @classmethod
    def ones(cls, batch: int, p: int) -> "VariationalMasks":
        return cls(None, np.ones((batch, p)), 0.0)


@dataclass
class LstmState:
    c: Tensor
    h: Tensor

    @classmethod
    def zeros(cls, batch: int, p: int) -> "LstmState":
        return cls(Tensor(np.zeros((batch, p))), Tensor(np.zeros((batch, p))))


def _check_rate(rate: float, what: str = "dropout rate") -> None:
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"{what} must lie in [0, 1], got {rate}")


def dropout_mask(shape, rate: float, rng) -> np.ndarray:
    """Bernoulli keep-mask scaled by 1/(1-rate).

    ``rng`` is a Generator, or a sequence of Generators with one per row of
    ``shape`` (independent per-row streams).
    """
    _check_rate(rate)
    if rate == 0.0:
        return np.ones(shape)
    if rate == 1.0:
        return np.zeros(shape)
    if isinstance(rng, np.random.Generator):
        u = rng.random(shape)
    else:
        u = np.stack([g.random(shape[1:]) for g in rng])
    return (u >= rate) / (1.0 - rate)


def recurrent_masks(batch: int, p: int, rate: float, rng, seed: int | None = None) -> VariationalMasks:
    """Masks on the recurrent connection only; the input is never dropped."""
    return VariationalMasks(None, dropout_mask((batch, p), rate, rng), rate, seed)


def lstm_step(x: Tensor, state: LstmState, w: LstmWeights, masks: VariationalMasks) -> LstmState:
    p = w.p
    if x.data.ndim != 2 or x.shape[1] != w.d:
        raise DimensionError(f"lstm_step: input {list(x.shape)} does not match d={w.d}")
    if state.h.shape != (x.shape[0], p) or masks.d_h.shape != (x.shape[0], p):
        raise DimensionError(
            f"lstm_step: state {list(state.h.shape)} / mask {list(masks.d_h.shape)} "
            f"do not match batch {x.shape[0]}, p={p}"
        )
    xin = x if masks.d_x is None else ag.mul(x, Tensor(masks.d_x))
    hin = ag.mul(state.h, Tensor(masks.d_h))
    pre = ag.linear(ag.concat([xin, hin], axis=1), w.W, w.b)
    i = ag.sigmoid(ag.slice_(pre, 0, p, axis=1))
    f = ag.sigmoid(ag.slice_(pre, p, 2 * p, axis=1))
    o = ag.sigmoid(ag.slice_(pre, 2 * p, 3 * p, axis=1))
    g = ag.tanh(ag.slice_(pre, 3 * p, 4 * p, axis=1))
    c = ag.add(ag.mul(f, state.c), ag.mul(i, g))
    h = ag.mul(o, ag.tanh(c))
    return LstmState(c, h)


def run_sequence(xs: Sequence[Tensor], w: LstmWeights, masks: VariationalMasks) -> list[LstmState]:
    if len(xs) == 0:
        raise DimensionError("run_sequence: empty sequence")
    state = LstmState.zeros(xs[0].shape[0], w.p)
    states = []
    for x in xs:
        state = lstm_step(x, state, w, masks)
        states.append(state)
    return states


def bidirectional_encode(
    xs: Sequence[Tensor],
    w_fwd: LstmWeights,
    w_bwd: LstmWeights,
    masks_fwd: VariationalMasks,
    masks_bwd: VariationalMasks,
) -> tuple[list[Tensor], Tensor]:
    """Return the concatenated per-step encodings (B, 2p) and the last forward state."""
    if w_fwd.W.shape != w_bwd.W.shape:
        raise DimensionError(
            f"encoder directions disagree: {list(w_fwd.W.shape)} vs {list(w_bwd.W.shape)}"
        )
    fwd = run_sequence(xs, w_fwd, masks_fwd)
    bwd = run_sequence(list(reversed(xs)), w_bwd, masks_bwd)[::-1]
    encoded = [ag.concat([f.h, b.h], axis=1) for f, b in zip(fwd, bwd)]
    return encoded, fwd[-1].h
