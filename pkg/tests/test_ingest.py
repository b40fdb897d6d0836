import calendar
import io
from datetime import date, datetime, timezone

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bsdp.errors import ConfigError, InvalidInputError, RecordError
from bsdp.geo import GeoPoint
from bsdp.ingest import (
    CSV_COLUMNS,
    DROPOFF,
    PICKUP,
    Region,
    SpatioTemporalKey,
    TrajectoryRecord,
    dump_regions,
    extract_positions,
    format_timestamp,
    load_regions,
    parse_timestamp,
    parse_trajectory_csv,
    partition_spatiotemporal,
    period_index,
    period_interval,
    validate_regions,
    write_trajectory_csv,
)

HEADER = ",".join(CSV_COLUMNS) + "\n"
ROW1 = "01,e1xx4,2018/10/25 10:20:22,39.914548,116.440848,2018/10/25 10:48:13,39.900323,116.484110\n"


def rec(bike, a, b, t0=1_540_000_000, t1=None, user="u"):
    return TrajectoryRecord(user, bike, t0, GeoPoint(*a), t1 if t1 is not None else t0 + 600, GeoPoint(*b))


def test_table_row_parses():
    result = parse_trajectory_csv(HEADER + ROW1)
    assert result.errors == []
    (r,) = result.records
    assert r.bike_id == "e1xx4"
    assert r.depart_time < r.arrive_time
    assert r.depart_time == calendar.timegm((2018, 10, 25, 10, 20, 22))
    assert r.arrive == GeoPoint(39.900323, 116.484110)


def test_header_only_is_empty():
    assert parse_trajectory_csv(HEADER).records == []


def test_bytes_and_binary_streams():
    data = (HEADER + ROW1).encode()
    assert len(parse_trajectory_csv(data).records) == 1
    assert len(parse_trajectory_csv(io.BytesIO(data)).records) == 1


def test_out_of_range_row_is_collected_and_rest_parsed():
    bad = "02,b2,2018/10/25 10:00:00,91.0,116.4,2018/10/25 10:10:00,39.9,116.4\n"
    result = parse_trajectory_csv(HEADER + bad + ROW1)
    assert len(result.records) == 1
    (err,) = result.errors
    assert err.line == 2
    assert "coordinate out of range" in str(err)


def test_strict_mode_aborts():
    bad = "02,b2,not a time,39.9,116.4,2018/10/25 10:10:00,39.9,116.4\n"
    with pytest.raises(RecordError) as info:
        parse_trajectory_csv(HEADER + ROW1 + bad, strict=True)
    assert info.value.line == 3


def test_wrong_header_rejected():
    with pytest.raises(RecordError):
        parse_trajectory_csv("a,b,c\n")


def test_arrival_before_departure_rejected():
    row = "01,b,2018/10/25 10:20:22,39.9,116.4,2018/10/25 10:00:00,39.9,116.4\n"
    result = parse_trajectory_csv(HEADER + row)
    assert result.records == [] and len(result.errors) == 1


def test_timestamps_accept_iso_and_round_trip():
    t = parse_timestamp("2018-10-25T10:20:22+08:00")
    assert t == calendar.timegm((2018, 10, 25, 2, 20, 22))
    assert parse_timestamp(format_timestamp(t)) == t
    with pytest.raises(InvalidInputError):
        parse_timestamp("yesterday")


def test_write_then_parse_round_trips():
    records = [rec("b1", (39.9, 116.4), (39.91, 116.41)), rec("b2", (39.123456789, 116.1), (39.2, 116.2))]
    buf = io.StringIO()
    write_trajectory_csv(records, buf)
    assert parse_trajectory_csv(buf.getvalue()).records == records


def test_single_record_gives_two_positions():
    ps = extract_positions([rec("b", (39.9, 116.4), (39.91, 116.41))])
    assert len(ps) == 2
    assert ps.kind.tolist() == [PICKUP, DROPOFF]


def test_chained_ride_drops_one_duplicate():
    r1 = rec("b", (39.9, 116.4), (39.91, 116.41))
    r2 = rec("b", (39.91, 116.41), (39.92, 116.42), t0=1_540_001_000)
    ps = extract_positions([r1, r2])
    assert len(ps) == 3
    assert ps.record_index.tolist() == [0, 0, 1]


def test_extract_matches_hash_set_oracle():
    rng = np.random.default_rng(11)
    records = []
    last: dict[str, tuple] = {}
    for i in range(1000):
        bike = f"b{rng.integers(0, 200)}"
        if bike in last and rng.random() < 0.1:
            start = last[bike]
        else:
            start = (round(rng.uniform(39.8, 40.0), 6), round(rng.uniform(116.3, 116.5), 6))
        end = (round(rng.uniform(39.8, 40.0), 6), round(rng.uniform(116.3, 116.5), 6))
        records.append(rec(bike, start, end, t0=1_540_000_000 + i))
        last[bike] = end
    oracle = {(r.bike_id, *p.as_tuple()) for r in records for p in (r.depart, r.arrive)}
    ps = extract_positions(records)
    assert len(ps) == len(oracle)
    assert set(ps.keys()) == oracle


def test_extract_empty_rejected():
    with pytest.raises(InvalidInputError):
        extract_positions([])


def _epoch(y, m, d, hh=12):
    return int(datetime(y, m, d, hh, tzinfo=timezone.utc).timestamp())


def test_three_days_three_buckets():
    records = [rec("b", (39.9, 116.4), (39.91, 116.41), t0=_epoch(2018, 10, d)) for d in (1, 2, 2, 3)]
    part = partition_spatiotemporal(records, ["R"], "day")
    assert len(part.buckets) == 3
    assert [len(v) for v in part.buckets.values()] == [1, 2, 1]


def test_week_buckets_follow_iso_weeks():
    days = [date(2018, 6, 4), date(2018, 6, 10), date(2018, 6, 11)]
    records = [rec("b", (39.9, 116.4), (39.91, 116.41), t0=_epoch(d.year, d.month, d.day)) for d in days]
    part = partition_spatiotemporal(records, None, "week")
    keys = list(part.buckets)
    assert len(keys) == 2
    iso = [d.isocalendar()[:2] for d in days]
    assert iso[0] == iso[1] != iso[2]
    assert len(part.buckets[keys[0]]) == 2


@given(st.integers(0, 4_000_000_000), st.sampled_from(["day", "week"]))
def test_period_interval_contains_epoch(epoch, gran):
    lo, hi = period_interval(period_index(epoch, gran), gran)
    assert lo <= epoch < hi


@given(st.integers(0, 4_000_000_000))
def test_week_index_matches_calendar(epoch):
    a = period_index(epoch, "week")
    start, _ = period_interval(a, "week")
    assert datetime.fromtimestamp(start, tz=timezone.utc).weekday() == 0


SQUARE_A = Region("A", [(39.0, 116.0), (39.0, 117.0), (40.0, 117.0), (40.0, 116.0)])
SQUARE_B = Region("B", [(40.0, 116.0), (40.0, 117.0), (41.0, 117.0), (41.0, 116.0)])


def test_outside_record_is_rejected_and_reported():
    inside = rec("b", (39.5, 116.5), (39.6, 116.6))
    outside = rec("c", (45.0, 100.0), (39.6, 116.6))
    part = partition_spatiotemporal([inside, outside], [SQUARE_A, SQUARE_B])
    assert part.rejected == [outside]
    assert part.report() == {"buckets": 1, "assigned": 1, "rejected": 1}
    (key,) = part.buckets
    assert key.region_id == "A"


def test_touching_regions_are_fine_but_overlap_is_not():
    validate_regions([SQUARE_A, SQUARE_B])
    overlap = Region("C", [(39.5, 116.5), (39.5, 117.5), (40.5, 117.5), (40.5, 116.5)])
    with pytest.raises(ConfigError):
        validate_regions([SQUARE_A, overlap])
    with pytest.raises(ConfigError):
        partition_spatiotemporal([], [SQUARE_A, overlap])
    with pytest.raises(ConfigError):
        validate_regions([SQUARE_A, Region("A", SQUARE_B.polygon)])


def test_regions_round_trip():
    assert load_regions(dump_regions([SQUARE_A, SQUARE_B])) == [SQUARE_A, SQUARE_B]


def test_key_interval_and_order():
    k1 = SpatioTemporalKey("A", 5)
    k2 = SpatioTemporalKey("A", 6)
    assert k1 < k2
    assert k1.interval() == (5 * 86400, 6 * 86400)


def test_unknown_granularity():
    with pytest.raises(ConfigError):
        partition_spatiotemporal([], None, "month")
