"""Prediction metrics and the constant-velocity baseline.

All inputs are de-normalized planar coordinates in metres.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .uncertainty import generalized_variance

NMI = 1852.0
HORIZON_HOURS = (1, 2, 3)
DEFAULT_LEVELS = (0.68, 0.95)


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim == 2 and truth.ndim == 2:
        pred, truth = pred[None], truth[None]
    if pred.shape != truth.shape or pred.ndim != 3 or pred.shape[-1] != 2:
        raise ContractError(f"predictions {list(pred.shape)} and truths {list(truth.shape)} must both be (N, h, 2)")
    return pred, truth


def step_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Euclidean error per window and step, (N, h)."""
    pred, truth = _check_pair(pred, truth)
    return np.linalg.norm(pred - truth, axis=-1)


def ape(pred: np.ndarray, truth: np.ndarray, k: int) -> float:
    """Mean error at step ``k`` (1-based)."""
    err = step_errors(pred, truth)
    if not 1 <= k <= err.shape[1]:
        raise ContractError(f"horizon index {k} outside [1, {err.shape[1]}]")
    if err.shape[0] == 0:
        return math.nan
    return float(err[:, k - 1].mean())


def ade(pred: np.ndarray, truth: np.ndarray) -> float:
    err = step_errors(pred, truth)
    return float(err.mean()) if err.size else math.nan


def chi2_2dof(level: float) -> float:
    """Quantile of the chi-square distribution with two degrees of freedom."""
    if not 0.0 < level < 1.0:
        raise ContractError(f"confidence level {level} outside (0, 1)")
    return -2.0 * math.log1p(-level)


def mahalanobis_sq(mean: np.ndarray, cov: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """r^T Sigma^-1 r per (window, step); NaN where Sigma is singular."""
    r = np.asarray(truth, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    a, b, c, d = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 0], cov[..., 1, 1]
    det = a * d - b * c
    scale = np.maximum(np.abs(a * d), np.finfo(float).tiny)
    singular = ~(det > 1e-12 * scale)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = (d * r[..., 0] ** 2 - (b + c) * r[..., 0] * r[..., 1] + a * r[..., 1] ** 2) / det
    return np.where(singular, np.nan, q)


def coverage(mean: np.ndarray, cov: np.ndarray, truth: np.ndarray, level: float) -> tuple[float, int]:
    """Fraction of (window, step) pairs inside the ``level`` ellipse, and the count of singular pairs excluded."""
    q = mahalanobis_sq(mean, cov, truth)
    valid = np.isfinite(q)
    n_bad = int((~valid).sum())
    if not valid.any():
        return math.nan, n_bad
    return float(np.mean(q[valid] <= chi2_2dof(level))), n_bad


def ncv_baseline(x: np.ndarray, h: int, delta: float = 1.0) -> np.ndarray:
    """Constant-velocity extrapolation from the last two inputs; (l, 2) -> (h, 2) or batched."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2] < 2:
        raise ContractError("constant-velocity baseline needs at least two input points")
    v = (x[..., -1, :] - x[..., -2, :]) / delta
    k = np.arange(1, h + 1, dtype=np.float64)
    return x[..., -1:, :] + (k * delta)[:, None] * v[..., None, :]


@dataclass
class BinRow:
    lo_nmi: float
    hi_nmi: float
    count: int
    ape_m: float
    mean_gv_m2: float


def distance_bins(
    last_obs: np.ndarray,
    origin: Sequence[float],
    bin_width: float = 5 * NMI,
) -> tuple[np.ndarray, int]:
    """Bin index of each window from the distance of its last observed point to ``origin``."""
    dist = np.linalg.norm(np.asarray(last_obs, dtype=np.float64) - np.asarray(origin, dtype=np.float64), axis=-1)
    idx = np.floor(dist / bin_width).astype(np.int64)
    return idx, int(idx.max()) + 1 if idx.size else 0


def distance_binned_ape(
    pred: np.ndarray,
    truth: np.ndarray,
    last_obs: np.ndarray,
    origin: Sequence[float],
    bin_width: float = 5 * NMI,
    k: int | None = None,
    gv: np.ndarray | None = None,
) -> list[BinRow]:
    """APE at step ``k`` (default: last) per distance bin; empty bins get count 0."""
    err = step_errors(pred, truth)
    k = err.shape[1] if k is None else k
    if not 1 <= k <= err.shape[1]:
        raise ContractError(f"horizon index {k} outside [1, {err.shape[1]}]")
    if len(last_obs) != err.shape[0]:
        raise DimensionError("one last-observed point per window is required")
    idx, n_bins = distance_bins(last_obs, origin, bin_width)
    rows = []
    for b in range(n_bins):
        sel = idx == b
        n = int(sel.sum())
        rows.append(
            BinRow(
                b * bin_width / NMI,
                (b + 1) * bin_width / NMI,
                n,
                float(err[sel, k - 1].mean()) if n else math.nan,
                float(gv[sel, k - 1].mean()) if (n and gv is not None) else math.nan,
            )
        )
    return rows


def write_bins_csv(path: Path | str, rows: list[BinRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lo_nmi", "hi_nmi", "count", "ape_m", "ape_nmi", "mean_gv_m2"])
        for r in rows:
            w.writerow([r.lo_nmi, r.hi_nmi, r.count, _num(r.ape_m), _num(r.ape_m / NMI), _num(r.mean_gv_m2)])


def _num(v: float):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def horizon_steps(delta: float, h: int) -> dict[str, int]:
    """Steps matching 1h/2h/3h ahead that fit inside the horizon."""
    out = {}
    for hours in HORIZON_HOURS:
        k = int(round(hours * 3600.0 / delta))
        if 1 <= k <= h:
            out[f"{hours}h"] = k
    return out


@dataclass
class MetricReport:
    n_windows: int
    horizon: int
    delta_seconds: float
    ape_m: dict[str, float]
    ape_km: dict[str, float]
    ape_nmi: dict[str, float]
    ade_m: float
    ade_km: float
    ade_nmi: float
    mean_gv_m2: dict[str, float]
    coverage: dict[str, float]
    coverage_pairs: int
    coverage_excluded: int
    bins: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def evaluate_predictions(
    mean: np.ndarray,
    cov: np.ndarray,
    truth: np.ndarray,
    last_obs: np.ndarray,
    origin: Sequence[float],
    delta: float = 900.0,
    bin_width: float = 5 * NMI,
    levels: Sequence[float] = DEFAULT_LEVELS,
) -> MetricReport:
    pred, truth = _check_pair(mean, truth)
    N, h = pred.shape[:2]
    steps = horizon_steps(delta, h)
    apes = {name: ape(pred, truth, k) for name, k in steps.items()}
    gv = generalized_variance(cov)
    gv_mean = {name: float(gv[:, k - 1].mean()) if N else math.nan for name, k in steps.items()}
    cover = {}
    excluded = 0
    for lv in levels:
        cover[f"{lv:g}"], excluded = coverage(pred, cov, truth, lv)
    d = ade(pred, truth)
    bins = distance_binned_ape(pred, truth, last_obs, origin, bin_width, h, gv)
    return MetricReport(
        n_windows=N,
        horizon=h,
        delta_seconds=float(delta),
        ape_m=apes,
        ape_km={k: v / 1000.0 for k, v in apes.items()},
        ape_nmi={k: v / NMI for k, v in apes.items()},
        ade_m=d,
        ade_km=d / 1000.0,
        ade_nmi=d / NMI,
        mean_gv_m2=gv_mean,
        coverage=cover,
        coverage_pairs=N * h,
        coverage_excluded=excluded,
        bins=[asdict(r) for r in bins],
    )


REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "n_windows", "horizon", "delta_seconds", "ape_m", "ape_km", "ape_nmi", "ade_m", "ade_km",
        "ade_nmi", "mean_gv_m2", "coverage", "coverage_pairs", "coverage_excluded", "bins", "extra",
    ],
    "properties": {
        "n_windows": {"type": "integer", "minimum": 0},
        "horizon": {"type": "integer", "minimum": 1},
        "delta_seconds": {"type": "number", "exclusiveMinimum": 0},
        "ape_m": {"$ref": "#/$defs/per_horizon"},
        "ape_km": {"$ref": "#/$defs/per_horizon"},
        "ape_nmi": {"$ref": "#/$defs/per_horizon"},
        "ade_m": {"type": ["number", "null"], "minimum": 0},
        "ade_km": {"type": ["number", "null"], "minimum": 0},
        "ade_nmi": {"type": ["number", "null"], "minimum": 0},
        "mean_gv_m2": {"$ref": "#/$defs/per_horizon"},
        "coverage": {
            "type": "object",
            "additionalProperties": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        },
        "coverage_pairs": {"type": "integer", "minimum": 0},
        "coverage_excluded": {"type": "integer", "minimum": 0},
        "bins": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["lo_nmi", "hi_nmi", "count", "ape_m", "mean_gv_m2"],
                "properties": {
                    "lo_nmi": {"type": "number", "minimum": 0},
                    "hi_nmi": {"type": "number", "minimum": 0},
                    "count": {"type": "integer", "minimum": 0},
                    "ape_m": {"type": ["number", "null"], "minimum": 0},
                    "mean_gv_m2": {"type": ["number", "null"], "minimum": 0},
                },
            },
        },
        "extra": {"type": "object"},
    },
    "$defs": {
        "per_horizon": {
            "type": "object",
            "propertyNames": {"pattern": "^[0-9]+h$"},
            "additionalProperties": {"type": ["number", "null"], "minimum": 0},
        }
    },
}
