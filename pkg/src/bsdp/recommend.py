"""Snap predicted stations onto legal parking positions with limited capacity."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError, RecordError
from .geo import GeoPoint, haversine_distance, haversine_matrix
from .graph import Station, StationGraph

POSITION_COLUMNS = ("position_id", "lat", "lon", "capacity")


@dataclass
class LegalPosition:
    position_id: str
    location: GeoPoint
    capacity: int
    remaining: int | None = None

    def __post_init__(self) -> None:
        if self.capacity < 0:
            raise InvalidInputError(f"position {self.position_id} has negative capacity")
        if self.remaining is None:
            self.remaining = self.capacity
        if not 0 <= self.remaining <= self.capacity:
            raise InvalidInputError(f"position {self.position_id}: remaining outside [0, capacity]")


def _id_key(position_id: str) -> tuple:
    # numeric ids compare numerically, everything else lexically
    try:
        return (0, float(position_id), position_id)
    except ValueError:
        return (1, 0.0, position_id)


def load_legal_positions(stream: IO[str] | str) -> list[LegalPosition]:
    text = io.StringIO(stream) if isinstance(stream, str) else stream
    reader = csv.DictReader(text)
    if tuple(f.strip() for f in reader.fieldnames or ()) != POSITION_COLUMNS:
        raise RecordError(1, f"legal positions header must be {','.join(POSITION_COLUMNS)}")
    out = []
    for row in reader:
        try:
            out.append(
                LegalPosition(
                    row["position_id"].strip(),
                    GeoPoint(float(row["lat"]), float(row["lon"])),
                    int(row["capacity"]),
                )
            )
        except (ValueError, InvalidInputError) as exc:
            raise RecordError(reader.line_num, str(exc)) from None
    return out


def dump_legal_positions(positions: Sequence[LegalPosition]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(POSITION_COLUMNS)
    for p in positions:
        w.writerow([p.position_id, repr(p.location.latitude), repr(p.location.longitude), p.capacity])
    return buf.getvalue()


def match_legal_position(v: Station | GeoPoint, positions: Sequence[LegalPosition]) -> tuple[LegalPosition, float]:
    """Nearest position by great-circle distance; ties go to the lower position id."""
    if not positions:
        raise InvalidInputError("no legal parking positions to match against")
    where = v.location if isinstance(v, Station) else v
    best, best_d = None, float("inf")
    for p in positions:
        d = haversine_distance(where, p.location)
        if d < best_d or (d == best_d and _id_key(p.position_id) < _id_key(best.position_id)):
            best, best_d = p, d
    return best, best_d


@dataclass
class Placement:
    station: Station
    position_id: str
    case: str


@dataclass
class Adjustment:
    station_id: str
    case: str
    moved_km: float
    split_into: list[str] = field(default_factory=list)


@dataclass
class LayoutRecommendation:
    placements: list[Placement]
    unplaced: int
    adjustments: list[Adjustment]

    @property
    def stations(self) -> list[Station]:
        return [p.station for p in self.placements]

    def to_json(self) -> dict:
        return {
            "stations": [
                {
                    "id": p.station.station_id,
                    "lat": p.station.lat,
                    "lon": p.station.lon,
                    "n": p.station.bike_count,
                    "level": p.station.level,
                    "position_id": p.position_id,
                    "case": p.case,
                }
                for p in self.placements
            ],
            "unplaced": self.unplaced,
            "adjustments": [
                {"station_id": a.station_id, "case": a.case, "moved_km": a.moved_km, "split_into": a.split_into}
                for a in self.adjustments
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def fine_tune_layout(
    predicted: StationGraph, positions: Sequence[LegalPosition], theta_d: float
) -> LayoutRecommendation:
    """Place every predicted station on legal positions, largest station first.

    Case a: nearest position within ``theta_d`` with room for the whole
    station. Case b: within ``theta_d`` but short of room, so the station
    keeps what fits and the overflow spills to the next-nearest positions
    that still have room, each spill becoming a new station. Case c: the
    nearest position is farther than ``theta_d``; the station moves there
    first and is then handled as a or b. Capacity is shared across stations.
    Bikes that no position can absorb are reported as ``unplaced``.
    """
    if not theta_d > 0:
        raise ConfigError("theta_d must be positive")
    if len(predicted) == 0:
        return LayoutRecommendation([], 0, [])
    if not positions:
        raise InvalidInputError("no legal parking positions to match against")
    pos = sorted(positions, key=lambda p: _id_key(p.position_id))
    remaining = np.array([p.capacity for p in pos], dtype=np.int64)
    pos_coords = np.array([p.location.as_tuple() for p in pos])
    order = sorted(range(len(predicted)), key=lambda k: (-predicted.vertices[k].bike_count, k))

    placements: list[Placement] = []
    adjustments: list[Adjustment] = []
    unplaced = 0
    for k in order:
        v = predicted.vertices[k]
        p, d = match_legal_position(v, pos)
        j = pos.index(p)
        case = "c" if d > theta_d else ("a" if remaining[j] >= v.bike_count else "b")
        if case == "c":
            # after relocation the station sits on p; re-judge capacity there
            inner = "a" if remaining[j] >= v.bike_count else "b"
        else:
            inner = case

        if inner == "a":
            remaining[j] -= v.bike_count
            placements.append(Placement(Station(v.station_id, p.location, v.bike_count), p.position_id, case))
            adjustments.append(Adjustment(v.station_id, case, d))
            continue

        # split: fill p, then the next-nearest positions (from p) with room left
        need = v.bike_count
        splits: list[str] = []
        dist_from_p = haversine_matrix(pos_coords[j : j + 1], pos_coords)[0]
        candidates = sorted(range(len(pos)), key=lambda q: (q != j, dist_from_p[q], q))
        first = True
        for q in candidates:
            if need == 0:
                break
            take = int(min(need, remaining[q]))
            if take <= 0:
                continue
            remaining[q] -= take
            need -= take
            sid = v.station_id if first else f"{v.station_id}.{len(splits) + 1}"
            if not first:
                splits.append(sid)
            first = False
            placements.append(Placement(Station(sid, pos[q].location, take), pos[q].position_id, case))
        unplaced += need
        adjustments.append(Adjustment(v.station_id, case, d, splits))

    for p, left in zip(pos, remaining):
        p.remaining = int(left)
    return LayoutRecommendation(placements, unplaced, adjustments)

