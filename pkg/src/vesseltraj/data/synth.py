"""Synthetic planar track generators used as desk-scale stand-ins for AIS data.

Tracks live in UTM zone 32 metres around ``ANCHOR`` (off the Danish coast) so
that exported geometry can be mapped back to WGS-84.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .dataset import Dataset, build_from_trajectories
from .trajectory import DEFAULT_SPLITS, Trajectory

ANCHOR = (560000.0, 6250000.0)
NMI = 1852.0
BRANCH_ANGLES = (35.0, 0.0, -35.0)  # degrees relative to the approach heading


@dataclass
class SynthConfig:
    scenario: str = "lines"
    n: int = 200
    noise: float = 0.0  # position noise sigma, metres
    seed: int = 0
    delta: float = 900.0
    seq_in: int = 12
    seq_out: int = 12
    splits: tuple[float, float, float] = DEFAULT_SPLITS
    # lines
    min_points: int | None = None  # defaults to seq_in + seq_out
    max_points: int | None = None  # defaults to min_points + 16
    speed: tuple[float, float] = (4.0, 8.0)  # m/s
    accel: float = 0.0  # |a| upper bound along the track, m/s^2
    period: float = 0.0  # > 0: shuttle back and forth along the line with this period in samples
    spread: float = 40e3  # start points uniform in a square of this half-width, metres
    # crossroad
    fork_nmi: float = 60.0
    branch_nmi: float = 60.0
    lateral: float = 300.0  # sigma of the approach offset across track, metres

    def __post_init__(self):
        if self.scenario not in ("lines", "crossroad"):
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose lines or crossroad")
        if self.n < 1 or self.noise < 0 or self.delta <= 0:
            raise ConfigError("synth needs n >= 1, noise >= 0 and delta > 0")


def lines(cfg: SynthConfig, rng: np.random.Generator) -> list[Trajectory]:
    """Straight tracks at constant speed.

    ``accel`` > 0 adds a constant along-track acceleration; ``period`` > 0
    instead moves the vessel back and forth along the line (peak speed =
    the drawn speed) so that constant-velocity extrapolation is biased.
    """
    lo = cfg.min_points or cfg.seq_in + cfg.seq_out
    hi = cfg.max_points or lo + 16
    out = []
    for i in range(cfg.n):
        T = int(rng.integers(lo, hi + 1))
        heading = rng.uniform(0.0, 2 * np.pi)
        speed = rng.uniform(*cfg.speed)
        a = rng.uniform(-cfg.accel, cfg.accel) if cfg.accel > 0 else 0.0
        start = np.array(ANCHOR) + rng.uniform(-cfg.spread, cfg.spread, size=2)
        t = cfg.delta * np.arange(T)
        if cfg.period > 0:
            omega = 2 * np.pi / (cfg.period * cfg.delta)
            s = speed / omega * np.sin(omega * t + rng.uniform(0.0, 2 * np.pi))
        else:
            s = speed * t + 0.5 * a * t**2
        xy = start + np.outer(s, [np.cos(heading), np.sin(heading)])
        if cfg.noise > 0:
            xy = xy + rng.normal(0.0, cfg.noise, size=xy.shape)
        out.append(Trajectory(f"line-{i:05d}", t, xy))
    return out


def crossroad(cfg: SynthConfig, rng: np.random.Generator) -> list[Trajectory]:
    """Eastbound approach from ``ANCHOR`` that forks into three branches.

    The branch is drawn uniformly and becomes the intention class.
    """
    out = []
    fork, branch = cfg.fork_nmi * NMI, cfg.branch_nmi * NMI
    for i in range(cfg.n):
        k = int(rng.integers(len(BRANCH_ANGLES)))
        speed = rng.uniform(*cfg.speed)
        offset = rng.normal(0.0, cfg.lateral)
        theta = np.radians(BRANCH_ANGLES[k])
        T = int(np.floor((fork + branch) / (speed * cfg.delta))) + 1
        s = speed * cfg.delta * np.arange(T)
        along = np.minimum(s, fork) + np.maximum(s - fork, 0.0) * np.cos(theta)
        across = offset + np.maximum(s - fork, 0.0) * np.sin(theta)
        xy = np.array(ANCHOR) + np.column_stack([along, across])
        if cfg.noise > 0:
            xy = xy + rng.normal(0.0, cfg.noise, size=xy.shape)
        out.append(Trajectory(f"cross-{i:05d}", cfg.delta * np.arange(T), xy, intent=k))
    return out


def synthesize(cfg: SynthConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    if cfg.scenario == "lines":
        trajs, vocab = lines(cfg, rng), []
        meta = {"scenario": "lines", "noise": cfg.noise, "accel": cfg.accel, "period": cfg.period}
    else:
        trajs = crossroad(cfg, rng)
        vocab = [f"branch{a:+.0f}" for a in BRANCH_ANGLES]
        meta = {
            "scenario": "crossroad",
            "noise": cfg.noise,
            "fork_m": cfg.fork_nmi * NMI,
            "class_counts": np.bincount([t.intent for t in trajs], minlength=3).tolist(),
        }
    meta.update({"n": cfg.n, "seed": cfg.seed, "delta": cfg.delta, "zone": 32, "origin": list(ANCHOR)})
    return build_from_trajectories(trajs, cfg.seq_in, cfg.seq_out, cfg.splits, cfg.seed, vocab, meta)
