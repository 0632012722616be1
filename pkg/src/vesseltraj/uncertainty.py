"""Monte Carlo dropout sampling and the aleatoric + epistemic moment combination."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .model import TrajectoryModel, covariance_from_head


@dataclass
class McBatch:
    """M dropout samples per window: means (N, M, h, 2) and covariances (N, M, h, 2, 2)."""

    means: np.ndarray
    covs: np.ndarray
    seed: int | None = None
    alphas: np.ndarray | None = None  # (N, M, h, l)

    def __post_init__(self):
        if self.means.ndim != 4 or self.means.shape[-1] != 2:
            raise DimensionError(f"sample means must be (N, M, h, 2), got {list(self.means.shape)}")
        if self.covs.shape != self.means.shape + (2,):
            raise DimensionError(
                f"sample covariances {list(self.covs.shape)} do not match means {list(self.means.shape)}"
            )
        if self.means.shape[1] < 1:
            raise ContractError("an MC batch needs at least one sample")

    @property
    def n_samples(self) -> int:
        return self.means.shape[1]

    @property
    def horizon(self) -> int:
        return self.means.shape[2]


@dataclass
class PredictionResult:
    """Total predictive moments per window and step.

    ``cov`` has its epistemic part clipped to be PSD; ``cov_raw`` is the
    literal moment formula.
    """

    mean: np.ndarray  # (N, h, 2)
    cov: np.ndarray  # (N, h, 2, 2)
    cov_raw: np.ndarray
    epistemic: np.ndarray
    aleatoric: np.ndarray
    batch: McBatch | None = field(default=None, repr=False)
    stats: object | None = None  # NormStats used to de-normalize, if any

    def __len__(self) -> int:
        return self.mean.shape[0]

    def denormalized(self, stats) -> "PredictionResult":
        D = np.diag(stats.std)
        conj = lambda c: D @ c @ D  # noqa: E731
        return PredictionResult(
            stats.denormalize(self.mean),
            conj(self.cov),
            conj(self.cov_raw),
            conj(self.epistemic),
            conj(self.aleatoric),
            self.batch,
            stats,
        )


def _row_streams(seed: int, windows: range, n_samples: int) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, i, j]) for i in windows for j in range(n_samples)]


def mc_forward(
    model: TrajectoryModel,
    x: np.ndarray,
    psi: np.ndarray | None = None,
    n_samples: int = 100,
    seed: int = 0,
    max_rows: int = 4096,
    workers: int = 1,
    keep_alphas: bool = False,
) -> McBatch:
    """Run ``n_samples`` dropout passes per window, batched as rows.

    Sample ``j`` of window ``i`` draws its masks from its own stream
    ``default_rng([seed, i, j])``, so results do not depend on chunking or on
    the number of workers.
    """
    if n_samples < 1:
        raise ContractError("need at least one MC sample")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    N = x.shape[0]
    if psi is not None:
        psi = np.asarray(psi, dtype=np.float64)
        if psi.ndim == 1:
            psi = np.broadcast_to(psi, (N, psi.shape[0]))
    per_chunk = max(1, max_rows // n_samples)
    chunks = [range(lo, min(N, lo + per_chunk)) for lo in range(0, N, per_chunk)]

    def run(windows: range):
        xs = np.repeat(x[windows.start : windows.stop], n_samples, axis=0)
        ps = None if psi is None else np.repeat(psi[windows.start : windows.stop], n_samples, axis=0)
        out = model.forward(xs, ps, mode="test", rng=_row_streams(seed, windows, n_samples))
        k = len(windows)
        means = out.mean_array().reshape(k, n_samples, -1, 2)
        heads = out.head_array().reshape(k, n_samples, -1, 3)
        alphas = out.alpha_array().reshape(k, n_samples, means.shape[2], -1) if keep_alphas else None
        return means, heads, alphas

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    means = np.concatenate([p[0] for p in parts])
    heads = np.concatenate([p[1] for p in parts])
    alphas = np.concatenate([p[2] for p in parts]) if keep_alphas else None
    return McBatch(means, covariance_from_head(heads), seed, alphas)


def _psd_clip(c: np.ndarray) -> np.ndarray:
    sym = 0.5 * (c + np.swapaxes(c, -1, -2))
    w, V = np.linalg.eigh(sym)
    out = (V * np.maximum(w, 0.0)[..., None, :]) @ np.swapaxes(V, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def combine_moments(batch: McBatch) -> PredictionResult:
    """mean = E[y_j]; cov = E[y_j y_j^T] - E[y_j] E[y_j]^T + E[Sigma_j], divisor M."""
    M = batch.n_samples
    y = batch.means
    ybar = y.sum(axis=1) / M
    second = np.einsum("nmhi,nmhj->nhij", y, y) / M
    epistemic = second - np.einsum("nhi,nhj->nhij", ybar, ybar)
    aleatoric = batch.covs.sum(axis=1) / M
    raw = epistemic + aleatoric
    return PredictionResult(ybar, _psd_clip(epistemic) + aleatoric, raw, epistemic, aleatoric, batch)


def generalized_variance(cov: np.ndarray) -> np.ndarray:
    """sqrt(det Sigma) for (..., 2, 2) covariances."""
    det = cov[..., 0, 0] * cov[..., 1, 1] - cov[..., 0, 1] * cov[..., 1, 0]
    return np.sqrt(np.maximum(det, 0.0))


def sequence_uncertainty_summary(result: PredictionResult) -> tuple[np.ndarray, np.ndarray]:
    """Per-step generalized variance (N, h) and its average over steps (N,)."""
    gv = generalized_variance(result.cov)
    return gv, gv.mean(axis=-1)


def predict(
    model: TrajectoryModel,
    x: np.ndarray,
    psi: np.ndarray | None = None,
    n_samples: int = 100,
    seed: int = 0,
    stats=None,
    workers: int = 1,
    keep_alphas: bool = False,
) -> PredictionResult:
    """MC prediction in normalized units, de-normalized when ``stats`` is given."""
    result = combine_moments(
        mc_forward(model, x, psi, n_samples, seed, workers=workers, keep_alphas=keep_alphas)
    )
    return result.denormalized(stats) if stats is not None else result
