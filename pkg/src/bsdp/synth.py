"""Synthetic dockless bike-sharing city with known stations, demand and rides."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timezone

import numpy as np

from .errors import ConfigError
from .geo import KM_PER_DEGREE, GeoPoint, haversine_matrix, haversine_pairs
from .ingest import (
    GRANULARITIES,
    Region,
    TrajectoryRecord,
    period_index,
    period_interval,
    write_trajectory_csv,
)
from .recommend import LegalPosition

DRIFT_MODELS = ("constant", "alternating", "linear_drift", "weekly_periodic")
CYCLING_SPEED_KMH = 12.0
COORD_DECIMALS = 7
HEX_PACKING = math.pi / (2 * math.sqrt(3))


@dataclass
class SynthConfig:
    rng_seed: int = 0
    bbox: tuple[float, float, float, float] = (39.88, 39.94, 116.38, 116.45)  # lat_min, lat_max, lon_min, lon_max
    n_stations: int = 30
    capacity_range: tuple[int, int] = (10, 30)
    rides_per_period: int = 500
    drift: str = "constant"
    drift_amplitude: int = 5
    gps_noise_km: float = 0.02
    n_periods: int = 10
    granularity: str = "day"
    start_date: str = "2018-10-01"
    min_separation_km: float | None = None
    n_bikes: int = 5000
    n_users: int = 2000

    def __post_init__(self) -> None:
        self.bbox = tuple(float(v) for v in self.bbox)  # type: ignore[assignment]
        self.capacity_range = tuple(int(v) for v in self.capacity_range)  # type: ignore[assignment]
        lat_lo, lat_hi, lon_lo, lon_hi = self.bbox
        if not (lat_hi > lat_lo and lon_hi > lon_lo):
            raise ConfigError("degenerate bounding box")
        for name in ("n_stations", "rides_per_period", "n_periods", "n_bikes", "n_users"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        lo, hi = self.capacity_range
        if not 0 < lo <= hi:
            raise ConfigError("capacity range must satisfy 0 < low <= high")
        if self.gps_noise_km < 0:
            raise ConfigError("gps noise must be non-negative")
        if self.drift not in DRIFT_MODELS:
            raise ConfigError(f"drift must be one of {DRIFT_MODELS}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}")
        if self.drift_amplitude < 0:
            raise ConfigError("drift amplitude must be non-negative")

    @property
    def separation_km(self) -> float:
        return 4.0 * self.gps_noise_km if self.min_separation_km is None else self.min_separation_km


@dataclass
class GroundTruth:
    stations: list[tuple[float, float]]
    base_counts: list[int]
    counts: list[list[int]]  # [period][station]
    od: list[list[list[int]]]  # [period][origin][destination]
    ride_stations: list[list[tuple[int, int]]]  # [period][ride] -> (origin, destination)
    periods: list[int]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "GroundTruth":
        return cls(
            stations=[tuple(s) for s in data["stations"]],
            base_counts=list(data["base_counts"]),
            counts=[list(c) for c in data["counts"]],
            od=[[list(row) for row in m] for m in data["od"]],
            ride_stations=[[tuple(p) for p in period] for period in data["ride_stations"]],
            periods=list(data["periods"]),
        )

    def endpoint_labels(self, period: int) -> np.ndarray:
        """True station of every endpoint, laid out pickup, dropoff per ride."""
        pairs = np.asarray(self.ride_stations[period], dtype=np.int64).reshape(-1, 2)
        return pairs.reshape(-1)


@dataclass
class SynthCity:
    config: SynthConfig
    records: list[list[TrajectoryRecord]]
    truth: GroundTruth

    def csv_streams(self) -> list[str]:
        out = []
        for period in self.records:
            buf = io.StringIO()
            write_trajectory_csv(period, buf)
            out.append(buf.getvalue())
        return out

    def all_records(self) -> list[TrajectoryRecord]:
        return [r for period in self.records for r in period]

    def region(self, region_id: str = "R0") -> Region:
        lat_lo, lat_hi, lon_lo, lon_hi = self.config.bbox
        return Region(region_id, [(lat_lo, lon_lo), (lat_lo, lon_hi), (lat_hi, lon_hi), (lat_hi, lon_lo)])


def _plant_stations(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    lat_lo, lat_hi, lon_lo, lon_hi = cfg.bbox
    sep = cfg.separation_km
    height = (lat_hi - lat_lo) * KM_PER_DEGREE
    width = (lon_hi - lon_lo) * KM_PER_DEGREE * math.cos(math.radians(max(abs(lat_lo), abs(lat_hi))))
    # disks of radius sep/2 cannot beat hexagonal packing of the grown box
    if cfg.n_stations * math.pi * (sep / 2) ** 2 > HEX_PACKING * (width + sep) * (height + sep):
        raise ConfigError(f"{cfg.n_stations} stations {sep} km apart cannot fit inside the box")
    placed: list[tuple[float, float]] = []
    attempts = 0
    budget = 200 * cfg.n_stations + 1000
    while len(placed) < cfg.n_stations:
        attempts += 1
        if attempts > budget:
            raise ConfigError(
                f"could not place {cfg.n_stations} stations {sep} km apart inside the box"
            )
        cand = (rng.uniform(lat_lo, lat_hi), rng.uniform(lon_lo, lon_hi))
        if placed and haversine_matrix(np.array([cand]), np.array(placed)).min() < sep:
            continue
        placed.append(cand)
    return np.array(placed)


def planted_counts(cfg: SynthConfig, base: np.ndarray) -> np.ndarray:
    """Bikes wanted at each station per period under the drift model, shape (T, K).

    Even-numbered stations move up first and odd ones down, so drift
    redistributes demand rather than inflating it.
    """
    t = np.arange(cfg.n_periods)[:, None]
    sign = np.where(np.arange(len(base)) % 2 == 0, 1, -1)[None, :]
    a = cfg.drift_amplitude
    if cfg.drift == "constant":
        counts = np.repeat(base[None, :], cfg.n_periods, axis=0)
    elif cfg.drift == "alternating":
        counts = base[None, :] + a * sign * np.where(t % 2 == 0, 1, -1)
    elif cfg.drift == "linear_drift":
        counts = base[None, :] + np.rint(a * sign * t / max(1, cfg.n_periods - 1)).astype(np.int64)
    else:  # weekly_periodic
        phase = 2.0 * np.pi * np.arange(len(base)) / len(base)
        counts = base[None, :] + np.rint(a * np.sin(2.0 * np.pi * t / 7.0 + phase[None, :])).astype(np.int64)
    return np.maximum(counts, 0).astype(np.int64)


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``total`` proportional to ``weights``."""
    w = weights.astype(np.float64)
    if w.sum() <= 0:
        w = np.ones_like(w)
    quota = total * w / w.sum()
    alloc = np.floor(quota).astype(np.int64)
    short = total - int(alloc.sum())
    order = np.lexsort((np.arange(len(w)), -(quota - alloc)))
    alloc[order[:short]] += 1
    return alloc


def _jitter(rng: np.random.Generator, lat: np.ndarray, sigma_km: float) -> np.ndarray:
    if sigma_km == 0:
        return np.zeros((len(lat), 2))
    north = rng.normal(0.0, sigma_km, len(lat))
    east = rng.normal(0.0, sigma_km, len(lat))
    return np.column_stack([north / KM_PER_DEGREE, east / (KM_PER_DEGREE * np.cos(np.radians(lat)))])


def generate_synthetic_city(config: SynthConfig) -> SynthCity:
    """Plant stations, draw per-period demand and emit noisy ride records.

    Destinations are apportioned exactly in proportion to the planted counts;
    origins are sampled with the same weights. Deterministic given the seed.
    """
    cfg = config
    rng = np.random.default_rng(cfg.rng_seed)
    stations = _plant_stations(cfg, rng)
    k = len(stations)
    lo, hi = cfg.capacity_range
    base = rng.integers(lo, hi + 1, size=k)
    counts = planted_counts(cfg, base)

    start = datetime.combine(date.fromisoformat(cfg.start_date), datetime.min.time(), tzinfo=timezone.utc)
    first = period_index(int(start.timestamp()), cfg.granularity)
    periods = list(range(first, first + cfg.n_periods))

    records: list[list[TrajectoryRecord]] = []
    od_all, rides_all = [], []
    for t, pidx in enumerate(periods):
        t0, t1 = period_interval(pidx, cfg.granularity)
        weights = counts[t].astype(np.float64)
        if weights.sum() <= 0:
            weights = np.ones(k)
        dest = np.repeat(np.arange(k), _apportion(cfg.rides_per_period, weights))
        rng.shuffle(dest)
        origin = rng.choice(k, size=cfg.rides_per_period, p=weights / weights.sum())
        o_pts = stations[origin] + _jitter(rng, stations[origin, 0], cfg.gps_noise_km)
        d_pts = stations[dest] + _jitter(rng, stations[dest, 0], cfg.gps_noise_km)
        o_pts = np.round(o_pts, COORD_DECIMALS)
        d_pts = np.round(d_pts, COORD_DECIMALS)
        depart = rng.integers(t0, t1, size=cfg.rides_per_period)
        ride_km = haversine_pairs(o_pts, d_pts)
        duration = np.rint(ride_km / CYCLING_SPEED_KMH * 3600.0).astype(np.int64)
        duration += rng.integers(0, 301, size=cfg.rides_per_period)
        bikes = rng.integers(0, cfg.n_bikes, size=cfg.rides_per_period)
        users = rng.integers(0, cfg.n_users, size=cfg.rides_per_period)

        order = np.lexsort((np.arange(cfg.rides_per_period), depart))
        period_records = [
            TrajectoryRecord(
                user_id=f"u{users[i]}",
                bike_id=f"b{bikes[i]}",
                depart_time=int(depart[i]),
                depart=GeoPoint(float(o_pts[i, 0]), float(o_pts[i, 1])),
                arrive_time=int(depart[i] + duration[i]),
                arrive=GeoPoint(float(d_pts[i, 0]), float(d_pts[i, 1])),
            )
            for i in order
        ]
        od = np.zeros((k, k), dtype=np.int64)
        np.add.at(od, (origin, dest), 1)
        records.append(period_records)
        od_all.append(od.tolist())
        rides_all.append([(int(origin[i]), int(dest[i])) for i in order])

    truth = GroundTruth(
        stations=[(float(a), float(b)) for a, b in stations],
        base_counts=base.tolist(),
        counts=counts.tolist(),
        od=od_all,
        ride_stations=rides_all,
        periods=periods,
    )
    return SynthCity(cfg, records, truth)


def plant_legal_positions(
    city: SynthCity, extra: int = 10, offset_km: float = 0.02, seed: int | None = None
) -> list[LegalPosition]:
    """One legal position beside each planted station plus ``extra`` random ones.

    Station-side capacity covers the largest planted count for that station.
    """
    cfg = city.config
    rng = np.random.default_rng(cfg.rng_seed + 1 if seed is None else seed)
    counts = np.asarray(city.truth.counts)
    lo, hi = cfg.capacity_range
    out = []
    for k, (lat, lon) in enumerate(city.truth.stations):
        ang = rng.uniform(0, 2 * math.pi)
        dlat = offset_km * math.cos(ang) / KM_PER_DEGREE
        dlon = offset_km * math.sin(ang) / (KM_PER_DEGREE * math.cos(math.radians(lat)))
        cap = int(counts[:, k].max()) + int(rng.integers(0, 5))
        out.append(LegalPosition(f"P{k:04d}", GeoPoint(round(lat + dlat, 7), round(lon + dlon, 7)), cap))
    lat_lo, lat_hi, lon_lo, lon_hi = cfg.bbox
    for e in range(extra):
        out.append(
            LegalPosition(
                f"X{e:04d}",
                GeoPoint(round(rng.uniform(lat_lo, lat_hi), 7), round(rng.uniform(lon_lo, lon_hi), 7)),
                int(rng.integers(lo, hi + 1)),
            )
        )
    return out


def dump_truth(truth: GroundTruth) -> str:
    return json.dumps(truth.to_json())
