import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsdp.errors import ConfigError, InvalidInputError, RecordError
from bsdp.geo import GeoPoint, haversine_distance, offset_point
from bsdp.graph import Station, StationGraph
from bsdp.recommend import (
    LegalPosition,
    dump_legal_positions,
    fine_tune_layout,
    load_legal_positions,
    match_legal_position,
)

ORIGIN = (39.90, 116.40)


def at(north_km, east_km):
    return GeoPoint(*offset_point(*ORIGIN, north_km, east_km))


def graph(*stations):
    return StationGraph.from_stations([Station(f"v{k}", loc, n) for k, (loc, n) in enumerate(stations)])


def test_single_position_is_nearest():
    p = LegalPosition("1", at(0.1, 0), 10)
    got, d = match_legal_position(at(0, 0), [p])
    assert got is p
    assert d == pytest.approx(haversine_distance(at(0, 0), p.location))


def test_equidistant_tie_goes_to_lower_id():
    same = [LegalPosition("2", at(0.1, 0), 5), LegalPosition("1", at(0.1, 0), 5)]
    assert match_legal_position(at(0, 0), same)[0].position_id == "1"
    # numeric ids compare as numbers, so "9" beats "10"
    numeric = [LegalPosition("10", at(0.1, 0), 5), LegalPosition("9", at(0.1, 0), 5)]
    assert match_legal_position(at(0, 0), numeric)[0].position_id == "9"


def test_match_equals_linear_scan():
    rng = np.random.default_rng(0)
    positions = [LegalPosition(str(k), at(rng.uniform(-3, 3), rng.uniform(-3, 3)), 5) for k in range(100)]
    for _ in range(20):
        q = at(rng.uniform(-3, 3), rng.uniform(-3, 3))
        best = None
        for p in positions:
            d = haversine_distance(q, p.location)
            if best is None or d < best[1] or (d == best[1] and int(p.position_id) < int(best[0].position_id)):
                best = (p, d)
        assert match_legal_position(q, positions) == best


def test_no_positions():
    with pytest.raises(InvalidInputError):
        match_legal_position(at(0, 0), [])


def test_case_a_unchanged():
    pos = [LegalPosition("1", at(0, 0), 20)]
    rec = fine_tune_layout(graph((at(0, 0), 15)), pos, 0.05)
    (pl,) = rec.placements
    assert pl.case == "a" and pl.position_id == "1" and pl.station.bike_count == 15
    assert pl.station.station_id == "v0"
    assert rec.unplaced == 0 and pos[0].remaining == 5


def test_case_b_splits_into_two():
    pos = [LegalPosition("1", at(0, 0), 10), LegalPosition("2", at(0.3, 0), 10)]
    rec = fine_tune_layout(graph((at(0, 0), 15)), pos, 0.05)
    assert [(p.position_id, p.station.bike_count, p.case) for p in rec.placements] == [
        ("1", 10, "b"), ("2", 5, "b")
    ]
    assert rec.adjustments[0].split_into == ["v0.1"]
    assert rec.placements[1].station.location == pos[1].location


def test_case_c_moves_then_absorbs():
    pos = [LegalPosition("1", at(0.3, 0), 20)]
    rec = fine_tune_layout(graph((at(0, 0), 12)), pos, 0.05)
    (pl,) = rec.placements
    assert pl.case == "c"
    assert pl.station.location == pos[0].location
    assert pl.station.station_id == "v0"
    assert rec.adjustments[0].moved_km == pytest.approx(0.3, rel=1e-3)


def test_exhaustion_counts_unplaced():
    pos = [LegalPosition("1", at(0, 0), 4), LegalPosition("2", at(1, 0), 3)]
    rec = fine_tune_layout(graph((at(0, 0), 12)), pos, 0.05)
    assert rec.unplaced == 5
    assert sum(p.station.bike_count for p in rec.placements) == 7


def test_largest_station_first():
    pos = [LegalPosition("1", at(0, 0), 10), LegalPosition("2", at(2, 0), 50)]
    rec = fine_tune_layout(graph((at(0, 0), 6), (at(0.01, 0), 9)), pos, 0.05)
    first = rec.placements[0]
    assert first.station.station_id == "v1" and first.position_id == "1" and first.case == "a"


def test_empty_prediction_and_bad_theta():
    assert fine_tune_layout(StationGraph.empty(), [], 0.05).placements == []
    with pytest.raises(ConfigError):
        fine_tune_layout(StationGraph.empty(), [], 0.0)


def test_positions_csv_round_trip_and_errors():
    pos = [LegalPosition("A1", at(0, 0), 3), LegalPosition("7", at(0.5, 0.5), 12)]
    back = load_legal_positions(dump_legal_positions(pos))
    assert [(p.position_id, p.location, p.capacity) for p in back] == [
        (p.position_id, p.location, p.capacity) for p in pos
    ]
    with pytest.raises(RecordError):
        load_legal_positions("id,lat,lon\n")
    with pytest.raises(RecordError):
        load_legal_positions("position_id,lat,lon,capacity\nA,39.9,116.4,-1\n")


def test_recommendation_json_shape():
    pos = [LegalPosition("1", at(0, 0), 20)]
    data = json.loads(fine_tune_layout(graph((at(0, 0), 15)), pos, 0.05).dumps())
    assert set(data) == {"stations", "unplaced", "adjustments"}
    assert set(data["stations"][0]) == {"id", "lat", "lon", "n", "level", "position_id", "case"}
    assert data["stations"][0]["level"] == "small"


def random_instance(rng):
    k = int(rng.integers(0, 12))
    stations = [(at(rng.uniform(-2, 2), rng.uniform(-2, 2)), int(rng.integers(5, 40))) for _ in range(k)]
    m = int(rng.integers(1, 15))
    pos = [
        (f"{j}", at(rng.uniform(-2, 2), rng.uniform(-2, 2)), int(rng.integers(0, 30)))
        for j in range(m)
    ]
    theta = float(rng.uniform(0.01, 1.0))
    return graph(*stations), pos, theta


def check_invariants(g, pos_specs, theta):
    pos = [LegalPosition(i, loc, cap) for i, loc, cap in pos_specs]
    rec = fine_tune_layout(g, pos, theta)
    by_id = {p.position_id: p for p in pos}
    assert sum(p.station.bike_count for p in rec.placements) + rec.unplaced == g.total_bikes
    load: dict[str, int] = {}
    for p in rec.placements:
        assert p.station.location == by_id[p.position_id].location
        assert p.station.bike_count > 0
        load[p.position_id] = load.get(p.position_id, 0) + p.station.bike_count
    for pid, total in load.items():
        assert total <= by_id[pid].capacity
        assert by_id[pid].remaining == by_id[pid].capacity - total
    return rec


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_conservation_legality_capacity(seed):
    check_invariants(*random_instance(np.random.default_rng(seed)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 10))
def test_more_capacity_never_more_unplaced(seed, extra):
    g, pos, theta = random_instance(np.random.default_rng(seed))
    base = check_invariants(g, pos, theta)
    roomier = check_invariants(g, [(i, loc, cap + extra) for i, loc, cap in pos], theta)
    assert roomier.unplaced <= base.unplaced


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_deterministic(seed):
    g, pos, theta = random_instance(np.random.default_rng(seed))
    a = fine_tune_layout(g, [LegalPosition(*p) for p in pos], theta).dumps()
    b = fine_tune_layout(g, [LegalPosition(*p) for p in pos], theta).dumps()
    assert a == b
