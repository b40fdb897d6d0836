"""Trajectory CSV parsing, position extraction and spatio-temporal partitioning."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError, RecordError
from .geo import GeoPoint

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "user_id",
    "bike_id",
    "depart_ts",
    "depart_lat",
    "depart_lon",
    "arrive_ts",
    "arrive_lat",
    "arrive_lon",
)
TABLE_TS_FORMAT = "%Y/%m/%d %H:%M:%S"
SECONDS_PER_DAY = 86_400
# 1970-01-01 was a Thursday; shifting by 3 days puts week boundaries on Mondays.
_WEEK_SHIFT_DAYS = 3
GRANULARITIES = ("day", "week")
PICKUP, DROPOFF = 0, 1
REJECT = "__reject__"


@dataclass(frozen=True, slots=True)
class TrajectoryRecord:
    user_id: str
    bike_id: str
    depart_time: int
    depart: GeoPoint
    arrive_time: int
    arrive: GeoPoint

    def __post_init__(self) -> None:
        if self.depart_time > self.arrive_time:
            raise InvalidInputError("departure after arrival")


@dataclass
class ParseResult:
    records: list[TrajectoryRecord]
    errors: list[RecordError] = field(default_factory=list)


def parse_timestamp(text: str) -> int:
    """Epoch seconds from ``YYYY/MM/DD HH:MM:SS`` or ISO-8601. Naive times are UTC."""
    text = text.strip()
    try:
        # the table format is ISO with slashes; fromisoformat is much faster than strptime
        dt = datetime.fromisoformat(text.replace("/", "-"))
    except ValueError:
        try:
            dt = datetime.strptime(text, TABLE_TS_FORMAT)
        except ValueError:
            raise InvalidInputError(f"unrecognised timestamp {text!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(epoch: int) -> str:
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime(TABLE_TS_FORMAT)


def _coordinate(text: str, lo: float, hi: float, name: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise InvalidInputError(f"{name} {text!r} is not a number") from None
    if not math.isfinite(value) or not lo <= value <= hi:
        raise InvalidInputError(f"coordinate out of range: {name}={text}")
    return value


def _parse_row(row: Sequence[str]) -> TrajectoryRecord:
    if len(row) != len(CSV_COLUMNS):
        raise InvalidInputError(f"expected {len(CSV_COLUMNS)} columns, got {len(row)}")
    user, bike, dts, dlat, dlon, ats, alat, alon = row
    depart = GeoPoint(
        _coordinate(dlat, -90, 90, "depart_lat"), _coordinate(dlon, -180, 180, "depart_lon")
    )
    arrive = GeoPoint(
        _coordinate(alat, -90, 90, "arrive_lat"), _coordinate(alon, -180, 180, "arrive_lon")
    )
    return TrajectoryRecord(
        user_id=user.strip(),
        bike_id=bike.strip(),
        depart_time=parse_timestamp(dts),
        depart=depart,
        arrive_time=parse_timestamp(ats),
        arrive=arrive,
    )


def parse_trajectory_csv(stream: IO[bytes] | IO[str] | bytes | str, strict: bool = False) -> ParseResult:
    """Parse the 8-column trajectory CSV.

    In lenient mode (default) malformed rows are collected in ``errors`` with
    their 1-based line number and parsing continues; ``strict=True`` raises
    the first :class:`RecordError`.
    """
    if isinstance(stream, bytes):
        text: IO[str] = io.StringIO(stream.decode("utf-8"))
    elif isinstance(stream, str):
        text = io.StringIO(stream)
    elif isinstance(stream, io.TextIOBase):
        text = stream
    else:
        text = io.TextIOWrapper(stream, encoding="utf-8", newline="")
    reader = csv.reader(text)
    header = next(reader, None)
    if header is None:
        raise RecordError(1, "missing header row")
    if [h.strip() for h in header] != list(CSV_COLUMNS):
        raise RecordError(1, f"unexpected header {header}")

    result = ParseResult(records=[])
    for row in reader:
        if not row:
            continue
        try:
            result.records.append(_parse_row(row))
        except InvalidInputError as exc:
            err = RecordError(reader.line_num, str(exc))
            if strict:
                raise err from exc
            result.errors.append(err)
    if result.errors:
        log.warning("skipped %d malformed rows", len(result.errors))
    return result


def write_trajectory_csv(records: Iterable[TrajectoryRecord], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow(
            [
                r.user_id,
                r.bike_id,
                format_timestamp(r.depart_time),
                repr(r.depart.latitude),
                repr(r.depart.longitude),
                format_timestamp(r.arrive_time),
                repr(r.arrive.latitude),
                repr(r.arrive.longitude),
            ]
        )


@dataclass
class PositionSet:
    """Deduplicated pickup/dropoff positions of one temporal subset.

    Entry ``k`` came from ``records[record_index[k]]``; ``kind`` is
    :data:`PICKUP` or :data:`DROPOFF`.
    """

    bike_ids: list[str]
    coords: np.ndarray  # (N, 2) lat, lon
    timestamps: np.ndarray
    kind: np.ndarray
    record_index: np.ndarray
    source_count: int

    def __len__(self) -> int:
        return len(self.bike_ids)

    def keys(self) -> list[tuple[str, float, float]]:
        return [(b, float(lat), float(lon)) for b, (lat, lon) in zip(self.bike_ids, self.coords)]


def extract_positions(records: Sequence[TrajectoryRecord]) -> PositionSet:
    """Emit both endpoints of every ride and drop exact (bike, lat, lon) repeats.

    The first occurrence wins, so output order follows record order with the
    pickup before the dropoff of each ride.
    """
    if not records:
        raise InvalidInputError("no records to extract positions from")
    seen: set[tuple[str, float, float]] = set()
    bikes: list[str] = []
    coords: list[tuple[float, float]] = []
    times: list[int] = []
    kinds: list[int] = []
    index: list[int] = []
    for i, r in enumerate(records):
        for kind, point, ts in ((PICKUP, r.depart, r.depart_time), (DROPOFF, r.arrive, r.arrive_time)):
            key = (r.bike_id, point.latitude, point.longitude)
            if key in seen:
                continue
            seen.add(key)
            bikes.append(r.bike_id)
            coords.append((point.latitude, point.longitude))
            times.append(ts)
            kinds.append(kind)
            index.append(i)
    return PositionSet(
        bike_ids=bikes,
        coords=np.array(coords, dtype=np.float64).reshape(-1, 2),
        timestamps=np.array(times, dtype=np.int64),
        kind=np.array(kinds, dtype=np.int8),
        record_index=np.array(index, dtype=np.int64),
        source_count=len(records),
    )


@dataclass(frozen=True, order=True)
class SpatioTemporalKey:
    region_id: str
    period_index: int
    period_granularity: str = "day"

    def interval(self) -> tuple[int, int]:
        """Half-open ``[start, end)`` in epoch seconds."""
        return period_interval(self.period_index, self.period_granularity)


def period_index(epoch: int, granularity: str) -> int:
    days = epoch // SECONDS_PER_DAY
    if granularity == "day":
        return days
    if granularity == "week":
        return (days + _WEEK_SHIFT_DAYS) // 7
    raise ConfigError(f"unknown granularity {granularity!r}")


def period_interval(index: int, granularity: str) -> tuple[int, int]:
    if granularity == "day":
        start = index * SECONDS_PER_DAY
        return start, start + SECONDS_PER_DAY
    if granularity == "week":
        start = (index * 7 - _WEEK_SHIFT_DAYS) * SECONDS_PER_DAY
        return start, start + 7 * SECONDS_PER_DAY
    raise ConfigError(f"unknown granularity {granularity!r}")


@dataclass
class Region:
    region_id: str
    polygon: list[tuple[float, float]]  # (lat, lon) vertices

    def contains(self, lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
        """Even-odd point-in-polygon test, vectorised over points."""
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        inside = np.zeros(lat.shape, dtype=bool)
        n = len(self.polygon)
        for k in range(n):
            y1, x1 = self.polygon[k]
            y2, x2 = self.polygon[(k + 1) % n]
            crosses = (y1 > lat) != (y2 > lat)
            if not crosses.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                x_at = x1 + (lat - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (lon < x_at)
        return inside


def load_regions(stream: IO[str] | str) -> list[Region]:
    data = json.loads(stream) if isinstance(stream, str) else json.load(stream)
    regions = [
        Region(str(item["region_id"]), [(float(p[0]), float(p[1])) for p in item["polygon"]])
        for item in data
    ]
    validate_regions(regions)
    return regions


def dump_regions(regions: Sequence[Region]) -> str:
    return json.dumps(
        [{"region_id": r.region_id, "polygon": [list(p) for p in r.polygon]} for r in regions],
        indent=2,
    )


def validate_regions(regions: Sequence[Region]) -> None:
    """Reject duplicate ids, degenerate polygons and overlapping interiors."""
    from shapely.geometry import Polygon

    ids = [r.region_id for r in regions]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate region ids")
    shapes = []
    for r in regions:
        if len(r.polygon) < 3:
            raise ConfigError(f"region {r.region_id} needs at least 3 vertices")
        shapes.append(Polygon([(lon, lat) for lat, lon in r.polygon]))
    for i in range(len(shapes)):
        for j in range(i + 1, len(shapes)):
            if shapes[i].intersection(shapes[j]).area > 0.0:
                raise ConfigError(f"regions {ids[i]} and {ids[j]} overlap")


@dataclass
class Partition:
    buckets: dict[SpatioTemporalKey, list[TrajectoryRecord]]
    rejected: list[TrajectoryRecord]

    def report(self) -> dict:
        return {
            "buckets": len(self.buckets),
            "assigned": sum(len(v) for v in self.buckets.values()),
            "rejected": len(self.rejected),
        }


def partition_spatiotemporal(
    records: Sequence[TrajectoryRecord],
    regions: Sequence[Region] | Sequence[str] | None,
    granularity: str = "day",
) -> Partition:
    """Bucket rides by (region of departure point, period of departure time).

    ``regions`` may be polygons, or plain region tags when the caller has
    already restricted ``records`` to a single region (then exactly one tag
    is expected). ``None`` means a single region named ``"all"``.
    """
    if granularity not in GRANULARITIES:
        raise ConfigError(f"granularity must be one of {GRANULARITIES}")
    if regions is None:
        regions = ["all"]
    buckets: dict[SpatioTemporalKey, list[TrajectoryRecord]] = defaultdict(list)
    rejected: list[TrajectoryRecord] = []
    if regions and all(isinstance(r, str) for r in regions):
        if len(regions) != 1:
            raise ConfigError("tag-only partitioning needs exactly one region tag")
        tag = regions[0]
        for rec in records:
            key = SpatioTemporalKey(tag, period_index(rec.depart_time, granularity), granularity)
            buckets[key].append(rec)
        return Partition(dict(sorted(buckets.items())), rejected)

    validate_regions(regions)  # type: ignore[arg-type]
    lat = np.array([r.depart.latitude for r in records])
    lon = np.array([r.depart.longitude for r in records])
    owner = np.full(len(records), -1, dtype=np.int64)
    for k, region in enumerate(regions):
        owner[(owner < 0) & region.contains(lat, lon)] = k  # type: ignore[union-attr]
    for rec, k in zip(records, owner):
        if k < 0:
            rejected.append(rec)
            continue
        key = SpatioTemporalKey(
            regions[k].region_id,  # type: ignore[union-attr]
            period_index(rec.depart_time, granularity),
            granularity,
        )
        buckets[key].append(rec)
    if rejected:
        log.info("%d records fell outside every region", len(rejected))
    return Partition(dict(sorted(buckets.items())), rejected)
