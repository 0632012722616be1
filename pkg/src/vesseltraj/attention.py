"""Additive attention over the encoder outputs with a pass-constant dropout mask."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionError


@dataclass
class AttentionWeights:
    W_h: Tensor  # (m, 2p)
    W_s: Tensor  # (m, p)
    v: Tensor  # (m,)

    def __post_init__(self):
        m = self.v.shape[0] if self.v.data.ndim == 1 else -1
        if m <= 0 or self.W_h.shape[0] != m or self.W_s.shape[0] != m:
            raise DimensionError(
                f"attention weights disagree on alignment width: W_h {list(self.W_h.shape)}, "
                f"W_s {list(self.W_s.shape)}, v {list(self.v.shape)}"
            )

    @property
    def m(self) -> int:
        return self.v.shape[0]

    @classmethod
    def init(cls, p: int, m: int, rng: np.random.Generator, name: str = "attn") -> "AttentionWeights":
        def u(fan_in, shape):
            b = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-b, b, size=shape)

        return cls(
            ag.parameter(u(2 * p, (m, 2 * p)), f"{name}.W_h"),
            ag.parameter(u(p, (m, p)), f"{name}.W_s"),
            ag.parameter(u(m, (m,)), f"{name}.v"),
        )


@dataclass
class AttentionMemory:
    """Masked encoder states and their projected keys, computed once per pass."""

    states: Tensor  # (B, l, 2p), already multiplied by d_a
    keys: Tensor  # (B, l, m)

    @property
    def length(self) -> int:
        return self.states.shape[1]


def prepare(encoded: Sequence[Tensor], w: AttentionWeights, d_a: np.ndarray) -> AttentionMemory:
    if len(encoded) == 0:
        raise DimensionError("attention over an empty encoder sequence")
    B, width = encoded[0].shape
    if w.W_h.shape[1] != width or d_a.shape != (B, width):
        raise DimensionError(
            f"attention: encoder width {width}, W_h {list(w.W_h.shape)}, mask {list(d_a.shape)}"
        )
    ell = len(encoded)
    stacked = ag.stack(list(encoded), axis=1)
    mask = np.broadcast_to(d_a[:, None, :], stacked.shape).copy()
    states = ag.mul(stacked, Tensor(mask))
    flat = ag.reshape(states, (B * ell, width))
    keys = ag.reshape(ag.linear(flat, w.W_h), (B, ell, w.m))
    return AttentionMemory(states, keys)


def attend(s_prev: Tensor, memory: AttentionMemory, w: AttentionWeights) -> tuple[Tensor, Tensor]:
    """Context vector (B, 2p) and attention weights (B, l) for one decoder step."""
    B, ell = memory.states.shape[0], memory.length
    if s_prev.data.ndim != 2 or s_prev.shape != (B, w.W_s.shape[1]):
        raise DimensionError(f"attention: decoder state {list(s_prev.shape)} does not fit W_s {list(w.W_s.shape)}")
    query = ag.expand(ag.linear(s_prev, w.W_s), axis=1, n=ell)
    act = ag.tanh(ag.add(memory.keys, query))
    scores = ag.matmul(ag.reshape(act, (B * ell, w.m)), ag.reshape(w.v, (w.m, 1)))
    alpha = ag.softmax(ag.reshape(scores, (B, ell)), axis=1)
    z = ag.bmm(ag.reshape(alpha, (B, 1, ell)), memory.states)
    return ag.reshape(z, (B, memory.states.shape[2])), alpha


def score(s_prev: Tensor, h_j: Tensor, w: AttentionWeights, d_a: np.ndarray) -> Tensor:
    """Alignment score v^T tanh(W_h (h_j * d_a) + W_s s_prev), one per row."""
    if h_j.shape[-1] != w.W_h.shape[1] or d_a.shape != h_j.shape:
        raise DimensionError(f"score: h_j {list(h_j.shape)}, mask {list(d_a.shape)}, W_h {list(w.W_h.shape)}")
    hm = ag.mul(h_j, Tensor(d_a))
    act = ag.tanh(ag.add(ag.linear(hm, w.W_h), ag.linear(s_prev, w.W_s)))
    return ag.reshape(ag.matmul(act, ag.reshape(w.v, (w.m, 1))), (h_j.shape[0],))


def context(
    s_prev: Tensor, encoded: Sequence[Tensor], w: AttentionWeights, d_a: np.ndarray
) -> tuple[Tensor, Tensor]:
    return attend(s_prev, prepare(encoded, w, d_a), w)
