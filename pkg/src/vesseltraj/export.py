"""GeoJSON and CSV output of predictions (WGS-84 on export)."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .data.geodesy import unproject_utm
from .evaluation import chi2_2dof

ELLIPSE_VERTICES = 64


def ellipse_ring(mean: np.ndarray, cov: np.ndarray, level: float, n: int = ELLIPSE_VERTICES) -> np.ndarray:
    """Closed ring (n + 1, 2) of the ``level`` confidence ellipse in planar coordinates."""
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    radii = np.sqrt(np.maximum(w, 0.0) * chi2_2dof(level))
    theta = 2 * np.pi * np.arange(n) / n
    unit = np.column_stack([np.cos(theta), np.sin(theta)])
    ring = mean + (unit * radii) @ V.T
    return np.vstack([ring, ring[:1]])


def _lonlat(xy: np.ndarray, zone: int) -> list[list[float]]:
    lat, lon = unproject_utm(xy[:, 0], xy[:, 1], zone)
    return [[round(float(a), 9), round(float(b), 9)] for a, b in zip(lon, lat)]


def prediction_features(
    mean: np.ndarray,
    cov: np.ndarray,
    history: np.ndarray | None = None,
    levels: Sequence[float] = (0.68, 0.95),
    zone: int = 32,
    window_ids: Sequence[str] | None = None,
    samples: np.ndarray | None = None,
) -> dict:
    """FeatureCollection: predicted track per window, per-step ellipses, optional history and MC tracks.

    ``mean`` (N, h, 2), ``cov`` (N, h, 2, 2), ``history`` (N, l, 2) and
    ``samples`` (N, M, h, 2) are in UTM metres.
    """
    feats = []
    N, h = mean.shape[:2]
    for i in range(N):
        wid = window_ids[i] if window_ids is not None else str(i)
        if history is not None:
            feats.append(_feature("LineString", _lonlat(history[i], zone), {"window": wid, "kind": "history"}))
        feats.append(_feature("LineString", _lonlat(mean[i], zone), {"window": wid, "kind": "prediction"}))
        if samples is not None:
            for j in range(samples.shape[1]):
                feats.append(
                    _feature("LineString", _lonlat(samples[i, j], zone), {"window": wid, "kind": "sample", "sample": j})
                )
        for k in range(h):
            for lv in sorted(levels, reverse=True):
                ring = ellipse_ring(mean[i, k], cov[i, k], lv)
                props = {"window": wid, "kind": "ellipse", "step": k + 1, "level": lv}
                feats.append(_feature("Polygon", [_lonlat(ring, zone)], props))
    return {"type": "FeatureCollection", "features": feats}


def _feature(kind: str, coords, props: dict) -> dict:
    return {"type": "Feature", "geometry": {"type": kind, "coordinates": coords}, "properties": props}


def write_geojson(path: Path | str, collection: dict) -> None:
    Path(path).write_text(json.dumps(collection, separators=(",", ":")) + "\n")


def write_predictions_csv(
    path: Path | str,
    mean: np.ndarray,
    cov: np.ndarray,
    zone: int = 32,
    window_ids: Sequence[str] | None = None,
    truth: np.ndarray | None = None,
) -> None:
    """One row per (window, step) with planar and geographic means and the covariance."""
    cols = ["window", "step", "easting", "northing", "lat", "lon", "var_e", "cov_en", "var_n", "gen_var_m2"]
    if truth is not None:
        cols += ["true_easting", "true_northing", "error_m"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        N, h = mean.shape[:2]
        for i in range(N):
            lat, lon = unproject_utm(mean[i, :, 0], mean[i, :, 1], zone)
            for k in range(h):
                c = cov[i, k]
                det = c[0, 0] * c[1, 1] - c[0, 1] * c[1, 0]
                row = [
                    window_ids[i] if window_ids is not None else i,
                    k + 1,
                    repr(float(mean[i, k, 0])),
                    repr(float(mean[i, k, 1])),
                    repr(float(lat[k])),
                    repr(float(lon[k])),
                    repr(float(c[0, 0])),
                    repr(float(c[0, 1])),
                    repr(float(c[1, 1])),
                    repr(math.sqrt(max(det, 0.0))),
                ]
                if truth is not None:
                    r = truth[i, k] - mean[i, k]
                    row += [repr(float(truth[i, k, 0])), repr(float(truth[i, k, 1])), repr(float(np.hypot(*r)))]
                w.writerow(row)


def write_attention_csv(path: Path | str, alphas: np.ndarray, window_ids: Sequence[str] | None = None) -> None:
    """Mean attention weights (N, h, l) as rows window, step, input index, weight."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "step", "input", "weight"])
        N, h, l = alphas.shape
        for i in range(N):
            for k in range(h):
                for j in range(l):
                    w.writerow([window_ids[i] if window_ids is not None else i, k + 1, j + 1, repr(float(alphas[i, k, j]))])
