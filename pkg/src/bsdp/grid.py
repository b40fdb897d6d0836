"""Fixed lat/lon raster used to turn station graphs into fixed-length vectors."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, ContractError

ANCHOR_POLICIES = ("cell_center", "historical_centroid")


@dataclass(frozen=True)
class GridCodec:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    rows: int = 16
    cols: int = 16
    cap_max: float = 10.0
    cell_anchor: str = "historical_centroid"

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("grid needs at least one row and column")
        if not self.cap_max > 0:
            raise ConfigError("cap_max must be positive")
        if not (self.lat_max > self.lat_min and self.lon_max > self.lon_min):
            raise ConfigError("degenerate codec bounding box")
        if self.cell_anchor not in ANCHOR_POLICIES:
            raise ConfigError(f"cell_anchor must be one of {ANCHOR_POLICIES}")

    @property
    def dim(self) -> int:
        return self.rows * self.cols

    def contains(self, lat: float, lon: float) -> bool:
        return self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max

    def cell_index(self, lat: float, lon: float) -> int:
        """Flat row-major cell index; the max edges belong to the last row/column."""
        if not self.contains(lat, lon):
            raise ContractError(f"({lat}, {lon}) lies outside the codec bounding box")
        r = int((lat - self.lat_min) / (self.lat_max - self.lat_min) * self.rows)
        c = int((lon - self.lon_min) / (self.lon_max - self.lon_min) * self.cols)
        return min(r, self.rows - 1) * self.cols + min(c, self.cols - 1)

    def cell_center(self, index: int) -> tuple[float, float]:
        r, c = divmod(index, self.cols)
        lat = self.lat_min + (r + 0.5) * (self.lat_max - self.lat_min) / self.rows
        lon = self.lon_min + (c + 0.5) * (self.lon_max - self.lon_min) / self.cols
        return lat, lon

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "GridCodec":
        return cls(**data)


def default_cap_max(cell_totals: Iterable[float]) -> float:
    """Largest per-cell bike total, rounded up to a multiple of 10 (at least 10)."""
    peak = max(cell_totals, default=0.0)
    return float(max(10, int(math.ceil(peak / 10.0)) * 10))


def fit_codec(
    stations: Iterable[tuple[float, float, int]] | np.ndarray,
    rows: int = 16,
    cols: int = 16,
    cap_max: float | None = None,
    cell_anchor: str = "historical_centroid",
    periods: Iterable[Iterable[tuple[float, float, int]]] | None = None,
) -> GridCodec:
    """Fit a codec over ``(lat, lon, n)`` stations.

    The box is the union bounding box padded by 1% of its span (and a small
    absolute margin, so a single station still gives a valid box). When
    ``cap_max`` is not given it is derived from the per-period cell totals
    of ``periods`` (or of ``stations`` taken as one period).
    """
    arr = np.asarray(stations if isinstance(stations, np.ndarray) else list(stations), dtype=np.float64)
    arr = arr.reshape(-1, 3)
    if len(arr) == 0:
        raise ContractError("cannot fit a codec without any station")
    lat_lo, lat_hi = float(arr[:, 0].min()), float(arr[:, 0].max())
    lon_lo, lon_hi = float(arr[:, 1].min()), float(arr[:, 1].max())
    pad_lat = 0.01 * (lat_hi - lat_lo) + 1e-4
    pad_lon = 0.01 * (lon_hi - lon_lo) + 1e-4
    box = GridCodec(
        lat_lo - pad_lat, lat_hi + pad_lat, lon_lo - pad_lon, lon_hi + pad_lon,
        rows, cols, 10.0, cell_anchor,
    )
    if cap_max is None:
        groups = [list(p) for p in periods] if periods is not None else [arr.tolist()]
        totals = []
        for group in groups:
            cells: dict[int, float] = {}
            for lat, lon, n in group:
                k = box.cell_index(lat, lon)
                cells[k] = cells.get(k, 0.0) + n
            totals.extend(cells.values())
        cap_max = default_cap_max(totals)
    return GridCodec(box.lat_min, box.lat_max, box.lon_min, box.lon_max, rows, cols, float(cap_max), cell_anchor)
