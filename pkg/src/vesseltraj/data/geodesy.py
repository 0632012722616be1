"""WGS-84 Transverse Mercator (UTM) forward and inverse projection.

Uses the Krueger n-series to third order, which stays at the millimetre level
across a UTM zone and well beyond it.
"""

from __future__ import annotations

import numpy as np

from ..errors import DomainError

A_AXIS = 6378137.0
FLATTENING = 1 / 298.257223563
K0 = 0.9996
FALSE_EASTING = 500000.0
FALSE_NORTHING_SOUTH = 10000000.0

# Points further than this from the central meridian are rejected.
MAX_LON_OFFSET = 9.0
MAX_LAT = 84.5

_n = FLATTENING / (2 - FLATTENING)
_A = A_AXIS / (1 + _n) * (1 + _n**2 / 4 + _n**4 / 64)
_ALPHA = (
    _n / 2 - 2 * _n**2 / 3 + 5 * _n**3 / 16,
    13 * _n**2 / 48 - 3 * _n**3 / 5,
    61 * _n**3 / 240,
)
_BETA = (
    _n / 2 - 2 * _n**2 / 3 + 37 * _n**3 / 96,
    _n**2 / 48 + _n**3 / 15,
    17 * _n**3 / 480,
)
_DELTA = (
    2 * _n - 2 * _n**2 / 3 - 2 * _n**3,
    7 * _n**2 / 3 - 8 * _n**3 / 5,
    56 * _n**3 / 15,
)
_K = 2 * np.sqrt(_n) / (1 + _n)


def central_meridian(zone: int) -> float:
    return (zone - 1) * 6 - 180 + 3


def zone_of(lon: float) -> int:
    return int((lon + 180) // 6) % 60 + 1


def project_utm(lat, lon, zone: int = 32, north: bool = True):
    """(lat, lon) degrees -> (easting, northing) metres in the given zone."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    lon0 = central_meridian(zone)
    if np.any(~np.isfinite(lat)) or np.any(~np.isfinite(lon)):
        raise DomainError("non-finite coordinate")
    if np.any(np.abs(lat) > MAX_LAT) or np.any(np.abs(lon - lon0) > MAX_LON_OFFSET):
        raise DomainError(f"coordinate outside the validity band of UTM zone {zone}")
    phi = np.radians(lat)
    dlam = np.radians(lon - lon0)
    sphi = np.sin(phi)
    t = np.sinh(np.arctanh(sphi) - _K * np.arctanh(_K * sphi))
    xi_p = np.arctan2(t, np.cos(dlam))
    eta_p = np.arctanh(np.sin(dlam) / np.sqrt(1 + t * t))
    xi, eta = xi_p.copy(), eta_p.copy()
    for j, a in enumerate(_ALPHA, start=1):
        xi += a * np.sin(2 * j * xi_p) * np.cosh(2 * j * eta_p)
        eta += a * np.cos(2 * j * xi_p) * np.sinh(2 * j * eta_p)
    easting = FALSE_EASTING + K0 * _A * eta
    northing = K0 * _A * xi + (0.0 if north else FALSE_NORTHING_SOUTH)
    return easting, northing


def unproject_utm(easting, northing, zone: int = 32, north: bool = True):
    """(easting, northing) metres -> (lat, lon) degrees."""
    e = np.asarray(easting, dtype=np.float64)
    n = np.asarray(northing, dtype=np.float64)
    if np.any(~np.isfinite(e)) or np.any(~np.isfinite(n)):
        raise DomainError("non-finite coordinate")
    xi = (n - (0.0 if north else FALSE_NORTHING_SOUTH)) / (K0 * _A)
    eta = (e - FALSE_EASTING) / (K0 * _A)
    xi_p, eta_p = xi.copy(), eta.copy()
    for j, b in enumerate(_BETA, start=1):
        xi_p -= b * np.sin(2 * j * xi) * np.cosh(2 * j * eta)
        eta_p -= b * np.cos(2 * j * xi) * np.sinh(2 * j * eta)
    chi = np.arcsin(np.sin(xi_p) / np.cosh(eta_p))
    phi = chi.copy()
    for j, d in enumerate(_DELTA, start=1):
        phi += d * np.sin(2 * j * chi)
    lon = central_meridian(zone) + np.degrees(np.arctan2(np.sinh(eta_p), np.cos(xi_p)))
    return np.degrees(phi), lon
