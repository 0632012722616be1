"""Attention encoder-decoder with a Gaussian output head and intention-aware init.

One :meth:`TrajectoryModel.forward` call samples every dropout mask once
(encoder directions, attention, decoder, intention) and is therefore one draw
from the dropout posterior. Inputs and outputs are in normalized planar
coordinates; de-normalization lives in the data layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import autograd as ag
from .attention import AttentionMemory, AttentionWeights, attend, prepare
from .autograd import Tensor
from .errors import ConfigError, DimensionError, ExtentError, NumericError
from .varlstm import (
    LstmState,
    LstmWeights,
    VariationalMasks,
    bidirectional_encode,
    dropout_mask,
    lstm_step,
    recurrent_masks,
)

Mode = Literal["train", "test", "deterministic"]
INPUT_DIM = 2


@dataclass
class ModelConfig:
    hidden: int = 64
    align: int | None = None
    n_intents: int = 0
    rec_dropout: float = 0.05
    attn_dropout: float | None = None
    intent_dropout: float = 0.3
    intent_scaling: Literal["paper", "compensated"] = "paper"
    forget_bias: float = 1.0
    seq_in: int = 12
    seq_out: int = 12

    def __post_init__(self):
        if self.hidden <= 0 or self.seq_in < 1 or self.seq_out < 1 or self.n_intents < 0:
            raise ConfigError(f"invalid model extents: {self}")
        if self.align is not None and self.align <= 0:
            raise ConfigError("alignment width must be positive")
        for name in ("rec_dropout", "intent_dropout"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.attn_dropout is not None and not 0.0 <= self.attn_dropout <= 1.0:
            raise ConfigError(f"attn_dropout must lie in [0, 1], got {self.attn_dropout}")
        if self.intent_scaling not in ("paper", "compensated"):
            raise ConfigError(f"unknown intent_scaling {self.intent_scaling!r}")

    @property
    def labeled(self) -> bool:
        return self.n_intents > 0

    @property
    def m(self) -> int:
        return self.align or self.hidden

    @property
    def attention_rate(self) -> float:
        return self.rec_dropout if self.attn_dropout is None else self.attn_dropout

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GaussianStep:
    mean: np.ndarray  # (2,)
    cov: np.ndarray  # (2, 2)
    chol: np.ndarray  # (2, 2) lower triangular, positive diagonal


def cholesky_factor(head: np.ndarray) -> np.ndarray:
    """Lower-triangular factor from covariance-head outputs (log b11, log b22, b21)."""
    head = np.asarray(head, dtype=np.float64)
    B = np.zeros(head.shape[:-1] + (2, 2))
    B[..., 0, 0] = np.exp(head[..., 0])
    B[..., 1, 1] = np.exp(head[..., 1])
    B[..., 1, 0] = head[..., 2]
    return B


def covariance_from_head(head: np.ndarray) -> np.ndarray:
    """Sigma = B B^T, symmetric by construction."""
    head = np.asarray(head, dtype=np.float64)
    b11, b22, b21 = np.exp(head[..., 0]), np.exp(head[..., 1]), head[..., 2]
    cov = np.empty(head.shape[:-1] + (2, 2))
    off = b11 * b21
    cov[..., 0, 0] = b11 * b11
    cov[..., 0, 1] = off
    cov[..., 1, 0] = off
    cov[..., 1, 1] = b21 * b21 + b22 * b22
    return cov


def gaussian_step(mean: np.ndarray, head: np.ndarray) -> GaussianStep:
    return GaussianStep(np.asarray(mean, dtype=np.float64), covariance_from_head(head), cholesky_factor(head))


@dataclass
class PassMasks:
    """Every random mask of one forward pass, one row per sequence."""

    enc_fwd: VariationalMasks
    enc_bwd: VariationalMasks
    attn: np.ndarray  # (B, 2p)
    dec: VariationalMasks
    intent: np.ndarray | None = None  # (B, p+v), train mode only

    @property
    def batch(self) -> int:
        return self.attn.shape[0]


@dataclass
class DecoderOutput:
    means: list[Tensor]  # h x (B, 2)
    heads: list[Tensor]  # h x (B, 3): log b11, log b22, b21
    alphas: list[Tensor] = field(default_factory=list)  # h x (B, l)
    masks: PassMasks | None = None

    def stacked(self) -> tuple[Tensor, Tensor]:
        return ag.stack(self.means, axis=1), ag.stack(self.heads, axis=1)

    def mean_array(self) -> np.ndarray:
        return np.stack([m.data for m in self.means], axis=1)

    def head_array(self) -> np.ndarray:
        return np.stack([c.data for c in self.heads], axis=1)

    def cov_array(self) -> np.ndarray:
        return covariance_from_head(self.head_array())

    def alpha_array(self) -> np.ndarray:
        return np.stack([a.data for a in self.alphas], axis=1)

    def steps(self, row: int = 0) -> list[GaussianStep]:
        heads = self.head_array()[row]
        return [gaussian_step(m, c) for m, c in zip(self.mean_array()[row], heads)]


def intention_mask(
    batch: int,
    p: int,
    v: int,
    gamma: float,
    rng,
    scaling: str = "paper",
) -> np.ndarray:
    """Group dropout mask on [h_last ; psi]: the v intention entries share one draw.

    ``paper`` scales the whole kept mask by (p+v)/p; ``compensated`` leaves the
    encoded entries at 1 and scales the intention entries by 1/(1-gamma).
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"intention dropout rate must lie in [0, 1], got {gamma}")
    if isinstance(rng, np.random.Generator):
        u = rng.random(batch)
    else:
        u = np.array([g.random() for g in rng])
    keep = (u >= gamma).astype(np.float64)
    mask = np.ones((batch, p + v))
    mask[:, p:] = keep[:, None]
    if scaling == "paper":
        mask *= (p + v) / p
    elif scaling == "compensated":
        if gamma < 1.0:
            mask[:, p:] /= 1.0 - gamma
    else:
        raise ConfigError(f"unknown intention scaling {scaling!r}")
    return mask


def init_decoder_state(
    h_last: Tensor,
    psi: np.ndarray | None,
    W: Tensor,
    b: Tensor | None,
    intent_mask: np.ndarray | None = None,
) -> Tensor:
    """s0 = tanh(W_psi ([h_last ; psi] * d_eta) + b); no mask means test mode."""
    B, p = h_last.shape
    v = W.shape[1] - p
    if v < 0:
        raise DimensionError(f"init weight {list(W.shape)} narrower than encoder state p={p}")
    if v == 0:
        eta = h_last
    else:
        if psi is None:
            psi = np.zeros((B, v))
        psi = np.asarray(psi, dtype=np.float64)
        if psi.shape != (B, v):
            raise ExtentError(f"intention vector {list(psi.shape)} does not match vocabulary size {v}")
        eta = ag.concat([h_last, Tensor(psi)], axis=1)
    if intent_mask is not None:
        if intent_mask.shape != eta.shape:
            raise DimensionError(f"intention mask {list(intent_mask.shape)} vs eta {list(eta.shape)}")
        eta = ag.mul(eta, Tensor(intent_mask))
    return ag.tanh(ag.linear(eta, W, b))


class TrajectoryModel:
    """Bidirectional VarLSTM encoder, additive attention, VarLSTM decoder, Gaussian head."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        expected = self.param_shapes(config)
        for name, shape in expected.items():
            if name not in params:
                raise ExtentError(f"missing parameter {name}")
            if params[name].shape != shape:
                hint = " (intention vocabulary size differs)" if name == "init.W" else ""
                raise ExtentError(f"parameter {name} has shape {list(params[name].shape)}, expected {list(shape)}{hint}")
        extra = set(params) - set(expected)
        if extra:
            raise ExtentError(f"unexpected parameters {sorted(extra)}")
        self.enc_fwd = LstmWeights(params["enc_fwd.W"], params["enc_fwd.b"])
        self.enc_bwd = LstmWeights(params["enc_bwd.W"], params["enc_bwd.b"])
        self.attn = AttentionWeights(params["attn.W_h"], params["attn.W_s"], params["attn.v"])
        self.dec = LstmWeights(params["dec.W"], params["dec.b"])

    @staticmethod
    def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
        p, v, m, d = config.hidden, config.n_intents, config.m, INPUT_DIM
        return {
            "enc_fwd.W": (4 * p, d + p),
            "enc_fwd.b": (4 * p,),
            "enc_bwd.W": (4 * p, d + p),
            "enc_bwd.b": (4 * p,),
            "attn.W_h": (m, 2 * p),
            "attn.W_s": (m, p),
            "attn.v": (m,),
            "init.W": (p, p + v),
            "init.b": (p,),
            "dec.W": (4 * p, d + 2 * p + p),
            "dec.b": (4 * p,),
            "head_mu.W": (d, p),
            "head_mu.b": (d,),
            "head_sigma.W": (3, p),
            "head_sigma.b": (3,),
        }

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "TrajectoryModel":
        rng = np.random.default_rng(seed)
        p, v, m, d = config.hidden, config.n_intents, config.m, INPUT_DIM
        enc_f = LstmWeights.init(d, p, rng, config.forget_bias, "enc_fwd")
        enc_b = LstmWeights.init(d, p, rng, config.forget_bias, "enc_bwd")
        attn = AttentionWeights.init(p, m, rng)
        dec = LstmWeights.init(d + 2 * p, p, rng, config.forget_bias, "dec")
        bound = 1.0 / np.sqrt(p)
        params = {
            "enc_fwd.W": enc_f.W,
            "enc_fwd.b": enc_f.b,
            "enc_bwd.W": enc_b.W,
            "enc_bwd.b": enc_b.b,
            "attn.W_h": attn.W_h,
            "attn.W_s": attn.W_s,
            "attn.v": attn.v,
            "init.W": ag.parameter(rng.uniform(-1, 1, (p, p + v)) / np.sqrt(p + v), "init.W"),
            "init.b": ag.parameter(np.zeros(p), "init.b"),
            "dec.W": dec.W,
            "dec.b": dec.b,
            "head_mu.W": ag.parameter(rng.uniform(-bound, bound, (d, p)), "head_mu.W"),
            "head_mu.b": ag.parameter(np.zeros(d), "head_mu.b"),
            "head_sigma.W": ag.parameter(rng.uniform(-bound, bound, (3, p)), "head_sigma.W"),
            "head_sigma.b": ag.parameter(np.zeros(3), "head_sigma.b"),
        }
        return cls(config, params)

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "TrajectoryModel":
        return cls(config, {k: ag.parameter(v, k) for k, v in arrays.items()})

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    # -- masks --------------------------------------------------------------

    def sample_masks(self, batch: int, rng, mode: Mode = "train") -> PassMasks:
        """Draw all masks for one pass.

        ``rng`` is a Generator (vectorised draws) or a list of ``batch``
        Generators, one stream per row; with per-row streams a row's masks do
        not depend on which other rows share the batch.
        """
        cfg = self.config
        p = cfg.hidden
        if mode == "deterministic":
            return PassMasks(
                VariationalMasks.ones(batch, p),
                VariationalMasks.ones(batch, p),
                np.ones((batch, 2 * p)),
                VariationalMasks.ones(batch, p),
            )
        if mode not in ("train", "test"):
            raise ConfigError(f"unknown forward mode {mode!r}")
        if not isinstance(rng, np.random.Generator) and len(rng) != batch:
            raise DimensionError(f"need one generator per row: {len(rng)} for batch {batch}")
        masks = PassMasks(
            recurrent_masks(batch, p, cfg.rec_dropout, rng),
            recurrent_masks(batch, p, cfg.rec_dropout, rng),
            dropout_mask((batch, 2 * p), cfg.attention_rate, rng),
            recurrent_masks(batch, p, cfg.rec_dropout, rng),
        )
        if mode == "train" and cfg.labeled:
            masks.intent = intention_mask(
                batch, p, cfg.n_intents, cfg.intent_dropout, rng, cfg.intent_scaling
            )
        return masks

    # -- pieces ----------------------------------------------------------------

    def encode(self, x: np.ndarray, masks: PassMasks) -> tuple[list[Tensor], Tensor]:
        xs = [Tensor(np.ascontiguousarray(x[:, t, :])) for t in range(x.shape[1])]
        return bidirectional_encode(xs, self.enc_fwd, self.enc_bwd, masks.enc_fwd, masks.enc_bwd)

    def init_state(self, h_last: Tensor, psi: np.ndarray | None, masks: PassMasks) -> Tensor:
        mask = masks.intent if psi is not None else None
        return init_decoder_state(h_last, psi, self.params["init.W"], self.params["init.b"], mask)

    def decode_step(
        self, y_prev: Tensor, state: LstmState, memory: AttentionMemory, masks: PassMasks
    ) -> tuple[Tensor, Tensor, LstmState, Tensor]:
        z, alpha = attend(state.h, memory, self.attn)
        c_in = ag.concat([y_prev, z], axis=1)
        state = lstm_step(c_in, state, self.dec, masks.dec)
        mean = ag.linear(state.h, self.params["head_mu.W"], self.params["head_mu.b"])
        head = ag.linear(state.h, self.params["head_sigma.W"], self.params["head_sigma.b"])
        return mean, head, state, alpha

    def decode_sequence(
        self,
        x_last: Tensor,
        s0: Tensor,
        memory: AttentionMemory,
        masks: PassMasks,
        horizon: int,
        targets: np.ndarray | None = None,
        teacher_forcing: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> DecoderOutput:
        if horizon < 1:
            raise DimensionError("decode horizon must be at least 1")
        state = LstmState(Tensor(np.zeros(s0.shape)), s0)
        y_prev = x_last
        out = DecoderOutput([], [], [], masks)
        for t in range(horizon):
            mean, head, state, alpha = self.decode_step(y_prev, state, memory, masks)
            if not (np.isfinite(mean.data).all() and np.isfinite(head.data).all()):
                raise NumericError(f"non-finite head output at decoder step {t + 1}")
            out.means.append(mean)
            out.heads.append(head)
            out.alphas.append(alpha)
            y_prev = mean
            if teacher_forcing > 0.0 and targets is not None and rng is not None and t + 1 < horizon:
                if rng.random() < teacher_forcing:
                    y_prev = Tensor(np.ascontiguousarray(targets[:, t, :]))
        return out

    # -- full pass -------------------------------------------------------------

    def forward(
        self,
        x: np.ndarray,
        psi: np.ndarray | None = None,
        mode: Mode = "train",
        rng=None,
        masks: PassMasks | None = None,
        targets: np.ndarray | None = None,
        teacher_forcing: float = 0.0,
        horizon: int | None = None,
    ) -> DecoderOutput:
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != INPUT_DIM:
            raise DimensionError(f"input must be (batch, length, 2), got {list(x.shape)}")
        B = x.shape[0]
        if psi is not None:
            psi = np.asarray(psi, dtype=np.float64)
            if psi.ndim == 1:
                psi = np.broadcast_to(psi, (B, psi.shape[0]))
            if not cfg.labeled:
                raise ExtentError("intention given to an unlabeled model")
            if psi.shape != (B, cfg.n_intents):
                raise ExtentError(
                    f"intention vectors {list(psi.shape)} do not match vocabulary size {cfg.n_intents}"
                )
        if masks is None:
            if rng is None and mode != "deterministic":
                raise ConfigError("a random generator is needed to sample dropout masks")
            masks = self.sample_masks(B, rng, mode)
        elif masks.batch != B:
            raise DimensionError(f"masks drawn for batch {masks.batch}, input has {B}")
        encoded, h_last = self.encode(x, masks)
        memory = prepare(encoded, self.attn, masks.attn)
        s0 = self.init_state(h_last, psi, masks)
        tf_rng = rng if isinstance(rng, np.random.Generator) else None
        return self.decode_sequence(
            Tensor(np.ascontiguousarray(x[:, -1, :])),
            s0,
            memory,
            masks,
            horizon or cfg.seq_out,
            targets,
            teacher_forcing,
            tf_rng,
        )


def one_hot(classes: Sequence[int] | np.ndarray, v: int) -> np.ndarray:
    classes = np.asarray(classes, dtype=np.int64)
    if np.any(classes < 0) or np.any(classes >= v):
        raise ExtentError(f"intention class outside vocabulary of size {v}")
    out = np.zeros((classes.shape[0], v))
    out[np.arange(classes.shape[0]), classes] = 1.0
    return out
