"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` (the lines are printed even
without ``-s``) or ``python tests/test_acceptance.py``.
"""

import json
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from bsdp.cli import main
from bsdp.cluster import ClusterParams, cluster_drop_offs
from bsdp.evaluation import kfold_splits, pairwise_comembership_auc
from bsdp.geo import GeoPoint, euclidean_matrix, haversine_distance
from bsdp.ggnn import (
    GruModel,
    TrainConfig,
    encode_sequence,
    gru_backward_gradients,
    predict_vector,
    sequence_loss,
    train_ggnn,
    train_on_vectors,
)
from bsdp.graph import Station, StationGraph, build_graph_sequence, remove_inferior, utilities
from bsdp.ingest import extract_positions
from bsdp.recommend import LegalPosition, fine_tune_layout
from bsdp.geo import offset_point
from bsdp.synth import SynthConfig, generate_synthetic_city

from oracles import density_peaks, graph_revenue_utility

mpmath.mp.dps = 40


@pytest.fixture
def report(capsys):
    def emit(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nAC{number} {'PASS' if ok else 'FAIL'}: {detail}")
    return emit


# 1 -------------------------------------------------------------------------


def _cosine_law_km(a, b):
    p1, p2 = mpmath.radians(a[0]), mpmath.radians(b[0])
    dl = mpmath.radians(b[1]) - mpmath.radians(a[1])
    c = mpmath.sin(p1) * mpmath.sin(p2) + mpmath.cos(p1) * mpmath.cos(p2) * mpmath.cos(dl)
    return float(6371.0 * mpmath.acos(max(mpmath.mpf(-1), min(mpmath.mpf(1), c))))


def test_ac1_haversine(report):
    rng = np.random.default_rng(2024)
    a = np.column_stack([rng.uniform(-89, 89, 1000), rng.uniform(-180, 180, 1000)])
    b = np.column_stack([rng.uniform(-89, 89, 1000), rng.uniform(-180, 180, 1000)])
    pa = [GeoPoint(*p) for p in a]
    pb = [GeoPoint(*p) for p in b]
    start = time.perf_counter()
    ours = [haversine_distance(x, y) for x, y in zip(pa, pb)]
    elapsed = time.perf_counter() - start
    oracle = [_cosine_law_km(x, y) for x, y in zip(a, b)]
    worst = max(abs(o - r) / r for o, r in zip(ours, oracle))
    row1 = haversine_distance(GeoPoint(39.914548, 116.440848), GeoPoint(39.900323, 116.484110))
    ok = worst < 1e-6 and abs(row1 - 4.0) < 0.05 and elapsed < 1.0
    report(1, ok, f"max rel err {worst:.2e} over 1000 pairs, table row 1 = {row1:.4f} km, {elapsed:.3f} s")
    assert ok


# 2 -------------------------------------------------------------------------


def _clustering_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 201))
    if seed % 3 == 0:
        pts = rng.integers(0, 12, size=(n, 2)).astype(float)
        d_c = float(rng.integers(1, 4))
    else:
        k = int(rng.integers(1, 6))
        centres = rng.uniform(0, 20, size=(k, 2))
        pts = centres[rng.integers(0, k, n)] + rng.normal(0, rng.uniform(0.2, 1.5), size=(n, 2))
        d_c = float(rng.uniform(0.3, 2.0))
    return pts, d_c, int(rng.integers(1, 8))


def test_ac2_clustering_oracle(report):
    start = time.perf_counter()
    mismatches = []
    for seed in range(50):
        pts, d_c, min_size = _clustering_instance(1000 + seed)
        _, _, label, centers = density_peaks(pts.tolist(), d_c, min_size=min_size)
        cs = cluster_drop_offs(pts, ClusterParams(cutoff_distance=d_c, min_station_size=min_size), euclidean_matrix)
        if cs.label.tolist() != label or cs.centers != centers:
            mismatches.append(seed)
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 10.0
    report(2, ok, f"{50 - len(mismatches)}/50 instances equal the brute-force labels, {elapsed:.2f} s")
    assert ok


# 3 -------------------------------------------------------------------------


def _recovery_auc(noise_km):
    cfg = SynthConfig(rng_seed=3, n_stations=30, rides_per_period=5000, gps_noise_km=noise_km,
                      n_periods=1, min_separation_km=0.4, n_bikes=50_000)
    city = generate_synthetic_city(cfg)
    ps = extract_positions(city.records[0])
    truth = [city.truth.ride_stations[0][r][k] for r, k in zip(ps.record_index, ps.kind)]
    cs = cluster_drop_offs(ps, ClusterParams(cutoff_distance=0.1, rho_threshold=3, delta_threshold=0.15))
    return pairwise_comembership_auc(cs.label, truth), cs.n_clusters, 2 * cfg.rides_per_period


def test_ac3_planted_recovery(report):
    start = time.perf_counter()
    auc_noisy, k_noisy, n_points = _recovery_auc(0.02)
    auc_exact, k_exact, _ = _recovery_auc(0.0)
    elapsed = time.perf_counter() - start
    ok = auc_noisy >= 0.95 and auc_exact == 1.0 and elapsed < 30.0
    report(3, ok, f"{n_points} points: AUC {auc_noisy:.4f} ({k_noisy} clusters) at sigma 0.02 km, "
                  f"AUC {auc_exact} ({k_exact} clusters) at sigma 0, {elapsed:.2f} s")
    assert ok


# 4 -------------------------------------------------------------------------


def test_ac4_graph_identities(report):
    rng = np.random.default_rng(44)
    bad_u = bad_tp = bad_prune = 0
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 40))
        pts = np.column_stack([rng.uniform(39.8, 40.0, n), rng.uniform(116.3, 116.5, n)])
        stations = [Station(f"v{k}", GeoPoint(*pts[k]), int(rng.integers(5, 40))) for k in range(n)]
        w = rng.integers(0, 8, size=(n, n)) * (rng.random((n, n)) < 0.3)
        w[0, 1] += 1
        g = StationGraph.from_stations(stations, w)
        err = abs(utilities(g).sum() - 1.0)
        worst = max(worst, err)
        bad_u += err > 1e-12
        bad_tp += sum(g.throughput(i) for i in range(n)) != 2 * g.total_throughput
        p, u = graph_revenue_utility(g.weights.tolist(), g.distances.tolist(), 1.0)
        tp, tu = float(np.percentile(p, 25)), float(np.percentile(u, 25))
        keep = [stations[i].station_id for i in range(n) if not (p[i] < tp and u[i] < tu)]
        bad_prune += [v.station_id for v in remove_inferior(g).graph.vertices] != keep
    ok = bad_u == 0 and bad_tp == 0 and bad_prune == 0
    report(4, ok, f"100 graphs: max |sum U - 1| = {worst:.1e}, throughput failures {bad_tp}, "
                  f"prune mismatches {bad_prune}")
    assert ok


# 5 -------------------------------------------------------------------------


def test_ac5_gradient_check(report):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(500 + seed)
        model = GruModel.initialise(4, 3, rng_seed=500 + seed, init_scale=0.8)
        model.params["b_r"] = rng.uniform(-0.5, 0.5, 3)
        model.params["b_z"] = rng.uniform(-0.5, 0.5, 3)
        xs, targets = rng.uniform(0, 1, (3, 4)), rng.uniform(0, 1, (3, 4))
        analytic = gru_backward_gradients(xs, targets, model).grads
        for name, w in model.params.items():
            for idx in np.ndindex(w.shape):
                keep = w[idx]
                w[idx] = keep + 1e-5
                up = sequence_loss(xs, targets, model)
                w[idx] = keep - 1e-5
                down = sequence_loss(xs, targets, model)
                w[idx] = keep
                numeric = (up - down) / 2e-5
                a = analytic[name][idx]
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 10.0
    report(5, ok, f"20 models (Dx=4, Dh=3, T=3): max relative error {worst:.2e}, {elapsed:.2f} s")
    assert ok


# 6 -------------------------------------------------------------------------


def _planted_sequence(drift, periods=40):
    cfg = SynthConfig(rng_seed=6, n_stations=30, n_periods=periods, drift=drift, rides_per_period=10,
                      min_separation_km=0.4)
    city = generate_synthetic_city(cfg)
    graphs = {}
    for t in range(periods):
        vertices = [
            Station(f"s{k}", GeoPoint(*city.truth.stations[k]), int(n))
            for k, n in enumerate(city.truth.counts[t]) if n >= 5
        ]
        graphs[t] = StationGraph.from_stations(vertices)
    return build_graph_sequence(graphs, "R")


def test_ac6_learning_sanity(report):
    start = time.perf_counter()
    config = TrainConfig(epochs=200)
    gs = _planted_sequence("constant")
    xs = encode_sequence(gs)
    model = train_ggnn(gs, config)
    drop = 1.0 - model.loss_history[-1] / model.loss_history[0]
    cell_err = float(np.abs(predict_vector(model, xs) - xs[-1]).max())

    alt = encode_sequence(_planted_sequence("alternating"))
    alt_model = train_on_vectors(alt[:-1], config)
    pred = predict_vector(alt_model, alt[:-1])
    rmse_model = float(np.sqrt(np.mean((pred - alt[-1]) ** 2)))
    rmse_persist = float(np.sqrt(np.mean((alt[-2] - alt[-1]) ** 2)))
    elapsed = time.perf_counter() - start
    ok = drop >= 0.5 and cell_err < 0.05 and rmse_model < rmse_persist and elapsed < 60.0
    report(6, ok, f"constant: loss -{100 * drop:.2f}%, max cell error {cell_err:.4f}; alternating: "
                  f"RMSE {rmse_model:.4f} vs persistence {rmse_persist:.4f}; {elapsed:.2f} s")
    assert ok


# 7 -------------------------------------------------------------------------


def _recommend_instance(rng):
    origin = (39.9, 116.4)
    k, m = int(rng.integers(0, 15)), int(rng.integers(1, 20))
    stations = [
        Station(f"v{i}", GeoPoint(*offset_point(*origin, rng.uniform(-2, 2), rng.uniform(-2, 2))),
                int(rng.integers(5, 45)))
        for i in range(k)
    ]
    positions = [
        (str(j), GeoPoint(*offset_point(*origin, rng.uniform(-2, 2), rng.uniform(-2, 2))), int(rng.integers(0, 30)))
        for j in range(m)
    ]
    return StationGraph.from_stations(stations), positions, float(rng.uniform(0.01, 1.0))


def _check_layout(g, specs, theta):
    positions = [LegalPosition(*s) for s in specs]
    rec = fine_tune_layout(g, positions, theta)
    by_id = {p.position_id: p for p in positions}
    conserved = sum(p.station.bike_count for p in rec.placements) + rec.unplaced == g.total_bikes
    legal = all(p.station.location == by_id[p.position_id].location for p in rec.placements)
    load: dict[str, int] = {}
    for p in rec.placements:
        load[p.position_id] = load.get(p.position_id, 0) + p.station.bike_count
    within = all(v <= by_id[k].capacity for k, v in load.items())
    return rec, conserved and legal and within


def test_ac7_recommendation_invariants(report):
    rng = np.random.default_rng(77)
    broken = monotone_fail = 0
    for _ in range(200):
        g, specs, theta = _recommend_instance(rng)
        rec, ok = _check_layout(g, specs, theta)
        bigger = [(i, loc, cap + int(rng.integers(0, 10))) for i, loc, cap in specs]
        rec2, ok2 = _check_layout(g, bigger, theta)
        broken += not (ok and ok2)
        monotone_fail += rec2.unplaced > rec.unplaced
    ok = broken == 0 and monotone_fail == 0
    report(7, ok, f"200 instances: invariant violations {broken}, monotonicity violations {monotone_fail}")
    assert ok


# 8 -------------------------------------------------------------------------


def test_ac8_five_fold_protocol(report):
    subsets = [(f"R{r}", p) for r in range(4) for p in range(5)]
    plan = kfold_splits(subsets, k=5, rng_seed=8)
    tested = [s for _, test in plan.rounds() for s in test]
    disjoint = all(not set(train) & set(test) for train, test in plan.rounds())
    ok = sorted(tested) == sorted(subsets) and len(tested) == 20 and disjoint and plan.k == 5
    report(8, ok, f"20 subsets over 5 folds of sizes {[len(f) for f in plan.folds]}, each tested once: "
                  f"{sorted(tested) == sorted(subsets)}")
    assert ok


# 9 -------------------------------------------------------------------------


E2E = [
    "--set", "synth_n_periods=60", "--set", "synth_rides_per_period=1667",
    "--set", "synth_drift=weekly_periodic", "--set", "delta_threshold=0.15", "--set", "rho_threshold=3",
]


def _files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_ac9_end_to_end(report, tmp_path):
    runs = []
    for name in ("first", "second"):
        work = tmp_path / name
        assert main(["synth", "--workdir", str(work), *E2E]) == 0
        start = time.perf_counter()
        code = main(["pipeline", "--workdir", str(work), *E2E])
        runs.append((code, time.perf_counter() - start, _files(work)))
    records = sum(1 for _ in open(tmp_path / "first" / "trajectories.csv")) - 1
    (c1, t1, f1), (c2, t2, f2) = runs
    metrics = json.loads(f1["eval/metrics.json"])
    identical = f1 == f2
    ok = c1 == c2 == 0 and t1 < 120.0 and identical and records >= 100_000
    report(9, ok, f"{records} records, 60 periods: pipeline {t1:.1f} s (rerun {t2:.1f} s), "
                  f"{len(f1)} files byte-identical: {identical}; AUC {metrics['auc']:.3f}, "
                  f"RMSE {metrics['rmse_model']:.4f} vs persistence {metrics['rmse_persistence']:.4f}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
