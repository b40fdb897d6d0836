"""Great-circle geometry.

Scalar :func:`haversine_distance` works on :class:`GeoPoint` values; the
``*_matrix`` helpers are the vectorised metrics used by clustering and graph
construction. A metric takes two ``(m, 2)`` / ``(n, 2)`` coordinate arrays and
returns the ``(m, n)`` distance block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidInputError

EARTH_RADIUS_KM = 6371.0
# km spanned by one degree of latitude
KM_PER_DEGREE = EARTH_RADIUS_KM * math.pi / 180.0

Metric = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, slots=True)
class GeoPoint:
    latitude: float
    longitude: float

    def __post_init__(self) -> None:
        lat, lon = self.latitude, self.longitude
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise InvalidInputError(f"non-finite coordinate ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise InvalidInputError(f"latitude {lat} out of range")
        if not -180.0 <= lon <= 180.0:
            raise InvalidInputError(f"longitude {lon} out of range")

    def as_tuple(self) -> tuple[float, float]:
        return (self.latitude, self.longitude)


def haversine(theta: float) -> float:
    """H(theta) = sin^2(theta / 2)."""
    return math.sin(theta / 2.0) ** 2


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in kilometres between two points.

    The result is exactly symmetric: the terms are ordered so that swapping
    ``a`` and ``b`` evaluates the same floating-point expression.
    """
    for p in (a, b):
        if not (math.isfinite(p.latitude) and math.isfinite(p.longitude)):
            raise InvalidInputError(f"non-finite coordinate {p}")
    lat1, lat2 = sorted((math.radians(a.latitude), math.radians(b.latitude)))
    dlat = abs(math.radians(a.latitude) - math.radians(b.latitude))
    dlon = abs(math.radians(a.longitude) - math.radians(b.longitude))
    h = haversine(dlat) + math.cos(lat1) * math.cos(lat2) * haversine(dlon)
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(1.0, h)))


def haversine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise great-circle distances (km) between ``(lat, lon)`` rows in degrees."""
    a = np.radians(np.asarray(a, dtype=np.float64))
    b = np.radians(np.asarray(b, dtype=np.float64))
    # sin((x - y) / 2) expanded so the transcendental calls stay O(m + n)
    sa, ca = np.sin(a * 0.5), np.cos(a * 0.5)
    sb, cb = np.sin(b * 0.5), np.cos(b * 0.5)
    h = np.multiply.outer(sa[:, 0], cb[:, 0])
    h -= np.multiply.outer(ca[:, 0], sb[:, 0])
    h *= h
    s_lon = np.multiply.outer(sa[:, 1], cb[:, 1])
    s_lon -= np.multiply.outer(ca[:, 1], sb[:, 1])
    s_lon *= s_lon
    s_lon *= np.multiply.outer(np.cos(a[:, 0]), np.cos(b[:, 0]))
    h += s_lon
    np.minimum(h, 1.0, out=h)
    np.sqrt(h, out=h)
    np.arcsin(h, out=h)
    h *= 2.0 * EARTH_RADIUS_KM
    return h


def haversine_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise great-circle distances (km) between two equally long coordinate arrays."""
    a = np.radians(np.asarray(a, dtype=np.float64))
    b = np.radians(np.asarray(b, dtype=np.float64))
    h = np.sin((a[:, 0] - b[:, 0]) * 0.5) ** 2 + np.cos(a[:, 0]) * np.cos(b[:, 0]) * np.sin(
        (a[:, 1] - b[:, 1]) * 0.5
    ) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(h, 1.0)))


def euclidean_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Planar metric, used for clustering tests on synthetic 2-D data."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dx = a[:, 0:1] - b[:, 0][None, :]
    dy = a[:, 1:2] - b[:, 1][None, :]
    return np.sqrt(dx * dx + dy * dy)


def offset_point(lat: float, lon: float, north_km: float, east_km: float) -> tuple[float, float]:
    """Shift a coordinate by a small local displacement (equirectangular)."""
    dlat = north_km / KM_PER_DEGREE
    dlon = east_km / (KM_PER_DEGREE * math.cos(math.radians(lat)))
    return lat + dlat, lon + dlon
