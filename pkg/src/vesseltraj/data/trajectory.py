"""Planar trajectories: resampling, windowing, normalization, labels and splits."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import AmbiguityError, ConfigError, ContractError, DataError, FormatError
from .geodesy import unproject_utm

logger = logging.getLogger(__name__)


@dataclass
class Trajectory:
    """Time-ordered UTM samples of one voyage."""

    id: str
    t: np.ndarray  # (T,) seconds, strictly increasing
    xy: np.ndarray  # (T, 2) easting, northing in metres
    intent: int | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if self.t.shape[0] != self.xy.shape[0]:
            raise DataError(f"trajectory {self.id}: {len(self.t)} times vs {len(self.xy)} positions")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise DataError(f"trajectory {self.id}: timestamps are not strictly increasing")

    def __len__(self) -> int:
        return self.t.shape[0]


def resample(traj: Trajectory, delta: float = 900.0) -> Trajectory | None:
    """Linear interpolation at t0, t0+delta, ... up to the last report.

    Returns None when the trajectory spans less than one interval.
    """
    if len(traj) < 2 or traj.t[-1] - traj.t[0] < delta:
        return None
    n = int(np.floor((traj.t[-1] - traj.t[0]) / delta)) + 1
    t = traj.t[0] + delta * np.arange(n)
    xy = np.column_stack([np.interp(t, traj.t, traj.xy[:, k]) for k in range(2)])
    return Trajectory(traj.id, t, xy, traj.intent)


@dataclass
class WindowSample:
    x: np.ndarray  # (l, 2)
    y: np.ndarray  # (h, 2)
    psi: int | None
    traj_id: str
    start: int


def window(traj: Trajectory, seq_in: int = 12, seq_out: int = 12) -> list[WindowSample]:
    """Stride-1 windows; the last target ends on the final point."""
    T, span = len(traj), seq_in + seq_out
    return [
        WindowSample(
            traj.xy[s : s + seq_in].copy(),
            traj.xy[s + seq_in : s + span].copy(),
            traj.intent,
            traj.id,
            s,
        )
        for s in range(T - span + 1)
    ]


@dataclass
class NormStats:
    mean: np.ndarray  # (2,)
    std: np.ndarray  # (2,)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(~(self.std > 0)):
            raise DataError(f"degenerate coordinate axis: std = {self.std.tolist()}")

    @classmethod
    def fit(cls, trajectories: Sequence[Trajectory]) -> "NormStats":
        pts = np.concatenate([t.xy for t in trajectories])
        return cls(pts.mean(axis=0), pts.std(axis=0))

    def normalize(self, xy: np.ndarray) -> np.ndarray:
        return (np.asarray(xy) - self.mean) / self.std

    def denormalize(self, xy: np.ndarray) -> np.ndarray:
        return np.asarray(xy) * self.std + self.mean

    def denormalize_cov(self, cov: np.ndarray) -> np.ndarray:
        D = np.diag(self.std)
        return D @ cov @ D

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(d["mean"], d["std"])


# -- intention labels -------------------------------------------------------


@dataclass(frozen=True)
class Region:
    name: str
    min_lat: float
    min_lon: float
    max_lat: float
    max_lon: float

    def contains(self, lat: float, lon: float) -> bool:
        return self.min_lat <= lat <= self.max_lat and self.min_lon <= lon <= self.max_lon


def load_regions(path: Path | str) -> list[Region]:
    with open(path) as fh:
        items = json.load(fh)
    try:
        return [
            Region(str(r["name"]), float(r["min_lat"]), float(r["min_lon"]), float(r["max_lat"]), float(r["max_lon"]))
            for r in items
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad region entry ({exc})") from exc


def load_labels(path: Path | str) -> dict[str, str]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"trajectory_id", "class"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: label file needs columns trajectory_id,class")
        return {row["trajectory_id"].strip(): row["class"].strip() for row in reader}


def intention_vocabulary(regions: Sequence[Region] | None, labels: dict[str, str] | None) -> list[str]:
    if regions:
        return [r.name for r in regions]
    if labels:
        names = set(labels.values())
        if all(n.isdigit() for n in names):
            return [str(i) for i in range(max(int(n) for n in names) + 1)]
        return sorted(names)
    return []


def label_intention(
    traj: Trajectory,
    vocabulary: Sequence[str],
    regions: Sequence[Region] | None = None,
    labels: dict[str, str] | None = None,
    zone: int = 32,
) -> int | None:
    """Class index of a trajectory; the label file wins over region matching.

    Returns None when nothing matches. Raises if the endpoint falls in more
    than one region.
    """
    if labels and traj.id in labels:
        cls = labels[traj.id]
        if cls in vocabulary:
            return list(vocabulary).index(cls)
        if cls.isdigit() and int(cls) < len(vocabulary):
            return int(cls)
        raise DataError(f"trajectory {traj.id}: class {cls!r} is not in the vocabulary {list(vocabulary)}")
    if not regions:
        return None
    lat, lon = unproject_utm(traj.xy[-1, 0], traj.xy[-1, 1], zone)
    hits = [i for i, r in enumerate(regions) if r.contains(float(lat), float(lon))]
    if len(hits) > 1:
        raise AmbiguityError(
            f"trajectory {traj.id}: endpoint lies in several regions: {[regions[i].name for i in hits]}"
        )
    return hits[0] if hits else None


# -- splits -----------------------------------------------------------------

DEFAULT_SPLITS = (0.72, 0.08, 0.20)


def split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {list(fractions)}")
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def split(
    trajectories: Sequence[Trajectory],
    fractions: Sequence[float] = DEFAULT_SPLITS,
    seed: int = 0,
) -> tuple[list[Trajectory], list[Trajectory], list[Trajectory]]:
    """Seeded trajectory-level split; input order does not matter (sorted by id first)."""
    ids = [t.id for t in trajectories]
    if len(set(ids)) != len(ids):
        raise ContractError("trajectory ids must be unique before splitting")
    n_train, n_val, _ = split_counts(len(trajectories), fractions)
    ordered = sorted(trajectories, key=lambda t: t.id)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]
