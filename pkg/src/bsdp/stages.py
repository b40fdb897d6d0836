"""File-level pipeline stages.

Each ``run_*`` function reads its inputs from disk, calls the library and
writes its artifacts (JSON/CSV plus a plot-data CSV) under the work
directory. Layout::

    <workdir>/trajectories.csv, regions.json, legal_positions.csv, ground_truth.json
    <workdir>/clusters/<region>/<period>.json, <period>.decision.csv
    <workdir>/graphs/<region>/<period>.json
    <workdir>/sequences/<region>.json
    <workdir>/models/<region>.json, <region>.loss.csv
    <workdir>/predictions/<region>.json
    <workdir>/recommendations/<region>.json
    <workdir>/eval/metrics.json, eval/curves.csv
"""

from __future__ import annotations

import errno
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .cluster import ClusterParams, ClusterSet, cluster_drop_offs
from .config import PipelineConfig
from .errors import ContractError, InvalidInputError
from .evaluation import kfold_splits, pairwise_comembership_auc, vector_rmse
from .ggnn import (
    GruModel,
    encode_sequence,
    predict_next_graph,
    predict_vector,
    train_ggnn,
    train_on_vectors,
)
from .graph import GraphSequence, StationGraph, build_graph_sequence, build_station_graph, remove_inferior
from .ingest import (
    ParseResult,
    Partition,
    PositionSet,
    SpatioTemporalKey,
    TrajectoryRecord,
    dump_regions,
    extract_positions,
    load_regions,
    parse_trajectory_csv,
    partition_spatiotemporal,
    write_trajectory_csv,
)
from .recommend import dump_legal_positions, fine_tune_layout, load_legal_positions
from .synth import GroundTruth, dump_truth, generate_synthetic_city, plant_legal_positions

log = logging.getLogger(__name__)


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(errno.ENOENT, "input not found", str(path))
    return path


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _write_json(path: Path, data) -> Path:
    return _write(path, json.dumps(data, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path):
    return json.loads(_require(path).read_text(encoding="utf-8"))


# -- synth ------------------------------------------------------------------


def run_synth(cfg: PipelineConfig) -> dict:
    city = generate_synthetic_city(cfg.synth_config())
    work = Path(cfg.workdir)
    with open(_ensure_parent(work / "trajectories.csv"), "w", encoding="utf-8", newline="") as fh:
        write_trajectory_csv(city.all_records(), fh)
    # pad the region so GPS noise never pushes a ride outside it
    region = city.region("R0")
    lat_lo, lat_hi, lon_lo, lon_hi = city.config.bbox
    pad = 0.01
    region.polygon = [
        (lat_lo - pad, lon_lo - pad), (lat_lo - pad, lon_hi + pad),
        (lat_hi + pad, lon_hi + pad), (lat_hi + pad, lon_lo - pad),
    ]
    _write(work / "regions.json", dump_regions([region]) + "\n")
    _write(work / "legal_positions.csv", dump_legal_positions(plant_legal_positions(city, cfg.synth_legal_extra)))
    _write(work / "ground_truth.json", dump_truth(city.truth) + "\n")
    return {"records": sum(len(p) for p in city.records), "periods": len(city.records), "stations": cfg.synth_n_stations}


def _ensure_parent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# -- ingest + cluster -------------------------------------------------------


def load_partition(cfg: PipelineConfig) -> tuple[Partition, ParseResult]:
    traj = _require(cfg.path("trajectories", "trajectories.csv"))
    with open(traj, "r", encoding="utf-8", newline="") as fh:
        parsed = parse_trajectory_csv(fh, strict=cfg.strict)
    regions_path = cfg.path("regions", "regions.json")
    if cfg.regions:
        _require(regions_path)
    regions = None
    if regions_path.exists():
        with open(regions_path, encoding="utf-8") as fh:
            regions = load_regions(fh)
    return partition_spatiotemporal(parsed.records, regions, cfg.granularity), parsed


def _cluster_bucket(args: tuple[list[TrajectoryRecord], ClusterParams]) -> ClusterSet:
    records, params = args
    return cluster_drop_offs(extract_positions(records), params)


def _bucket_name(key: SpatioTemporalKey) -> str:
    return f"{key.period_index:06d}"


def run_cluster(cfg: PipelineConfig) -> dict:
    partition, parsed = load_partition(cfg)
    params = cfg.cluster_params()
    keys = list(partition.buckets)
    jobs = [(partition.buckets[k], params) for k in keys]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_cluster_bucket, jobs))
    else:
        results = [_cluster_bucket(j) for j in jobs]
    out = Path(cfg.workdir) / "clusters"
    summary = []
    for key, cs in zip(keys, results):
        base = out / key.region_id / _bucket_name(key)
        _write(base.with_suffix(".json"), json.dumps(cs.to_json()) + "\n")
        _write(base.with_suffix(".decision.csv"), cs.decision_graph_csv())
        summary.append(
            {"region": key.region_id, "period": key.period_index, "points": len(cs.rho),
             "clusters": cs.n_clusters, "warning": cs.warning}
        )
    report = {
        "granularity": cfg.granularity,
        "partition": partition.report(),
        "row_errors": [str(e) for e in parsed.errors],
        "buckets": summary,
    }
    _write_json(out / "report.json", report)
    return report


def _bucket_files(root: Path) -> dict[str, dict[int, Path]]:
    found: dict[str, dict[int, Path]] = {}
    for path in sorted(_require(root).glob("*/*.json")):
        found.setdefault(path.parent.name, {})[int(path.stem)] = path
    if not found:
        raise InvalidInputError(f"no stage outputs under {root}")
    return found


# -- graph ------------------------------------------------------------------


def run_graph(cfg: PipelineConfig) -> dict:
    partition, _ = load_partition(cfg)
    files = _bucket_files(Path(cfg.workdir) / "clusters")
    out = Path(cfg.workdir) / "graphs"
    summary = []
    for region, by_period in files.items():
        for period, path in by_period.items():
            key = SpatioTemporalKey(region, period, cfg.granularity)
            records = partition.buckets.get(key)
            if records is None:
                raise ContractError(f"cluster file {path} has no matching trajectory bucket")
            positions = extract_positions(records)
            cs = ClusterSet.from_json(_read_json(path))
            if len(cs.rho) != len(positions) or not np.array_equal(cs.coords, positions.coords):
                raise ContractError(f"cluster file {path} does not match the trajectory bucket")
            cs.positions = positions
            g = build_station_graph(cs, records, min_station_size=cfg.min_station_size)
            pruned = remove_inferior(g, cfg.theta_p, cfg.theta_u, cfg.alpha, cfg.inferior_percentile)
            _write_json(out / region / f"{period:06d}.json", pruned.graph.to_json())
            summary.append(
                {"region": region, "period": period, "stations": len(g), "removed": len(pruned.removed),
                 "theta_p": pruned.theta_p, "theta_u": pruned.theta_u}
            )
    report = {"graphs": summary}
    _write_json(out / "report.json", report)
    return report


# -- sequence ---------------------------------------------------------------


def run_sequence(cfg: PipelineConfig) -> dict:
    files = _bucket_files(Path(cfg.workdir) / "graphs")
    out = Path(cfg.workdir) / "sequences"
    summary = {}
    for region, by_period in files.items():
        graphs = {p: StationGraph.from_json(_read_json(path)) for p, path in by_period.items()}
        gs = build_graph_sequence(
            graphs, region, cfg.granularity, cfg.grid_rows, cfg.grid_cols, cfg.cap_max, cfg.cell_anchor
        )
        _write(out / f"{region}.json", gs.dumps() + "\n")
        summary[region] = {"periods": len(gs), "filled": sum(gs.filled), "cap_max": gs.codec.cap_max}
    return summary


def _sequences(cfg: PipelineConfig) -> dict[str, GraphSequence]:
    root = _require(Path(cfg.workdir) / "sequences")
    found = {p.stem: GraphSequence.from_json(_read_json(p)) for p in sorted(root.glob("*.json"))}
    if not found:
        raise InvalidInputError(f"no sequences under {root}")
    return found


# -- train / predict / recommend ------------------------------------------


def run_train(cfg: PipelineConfig) -> dict:
    out = Path(cfg.workdir) / "models"
    summary = {}
    for region, gs in _sequences(cfg).items():
        model = train_ggnn(gs, cfg.train_config())
        _write(out / f"{region}.json", model.dumps() + "\n")
        curve = "epoch,loss\n" + "".join(f"{e},{loss!r}\n" for e, loss in enumerate(model.loss_history, 1))
        _write(out / f"{region}.loss.csv", curve)
        summary[region] = {"first_loss": model.loss_history[0], "final_loss": model.loss_history[-1]}
    return summary


def run_predict(cfg: PipelineConfig) -> dict:
    out = Path(cfg.workdir) / "predictions"
    summary = {}
    for region, gs in _sequences(cfg).items():
        model = GruModel.from_json(_read_json(Path(cfg.workdir) / "models" / f"{region}.json"))
        g = predict_next_graph(model, gs)
        data = g.to_json()
        data["region_id"] = region
        data["period"] = gs.periods[-1] + 1
        _write_json(out / f"{region}.json", data)
        summary[region] = {"stations": len(g), "bikes": g.total_bikes}
    return summary


def run_recommend(cfg: PipelineConfig) -> dict:
    with open(_require(cfg.path("legal_positions", "legal_positions.csv")), encoding="utf-8", newline="") as fh:
        positions = load_legal_positions(fh)
    root = _require(Path(cfg.workdir) / "predictions")
    out = Path(cfg.workdir) / "recommendations"
    summary = {}
    for path in sorted(root.glob("*.json")):
        predicted = StationGraph.from_json(_read_json(path))
        rec = fine_tune_layout(predicted, positions, cfg.theta_d)
        _write(out / path.name, rec.dumps() + "\n")
        summary[path.stem] = {"stations": len(rec.placements), "unplaced": rec.unplaced}
    return summary


# -- eval -------------------------------------------------------------------


@dataclass
class FoldScore:
    fold: int
    test_periods: list[int]
    rmse_model: float
    rmse_persistence: float
    auc: float | None


def evaluate_sequence(gs: GraphSequence, cfg: PipelineConfig) -> list[FoldScore]:
    """k-fold over forecast targets: each fold's periods are masked out of
    training and then forecast from their full preceding history."""
    xs = encode_sequence(gs)
    targets = list(range(1, len(xs)))
    plan = kfold_splits(targets, cfg.folds, cfg.seed)
    scores = []
    for f, (_, test) in enumerate(plan.rounds()):
        mask = np.ones(len(xs) - 1, bool)
        for t in test:
            mask[t - 1] = False
        model = train_on_vectors(xs, cfg.train_config(), mask, codec=gs.codec)
        test = sorted(test)
        rm = [vector_rmse(predict_vector(model, xs[:t]), xs[t]) for t in test]
        rp = [vector_rmse(xs[t - 1], xs[t]) for t in test]
        scores.append(FoldScore(f, [gs.periods[t] for t in test], float(np.mean(rm)), float(np.mean(rp)), None))
    return scores


def clustering_auc(
    records: Sequence[TrajectoryRecord], cs: ClusterSet, truth: GroundTruth, period: int
) -> float:
    """Co-membership AUC of one bucket's clustering against the planted stations."""
    t = truth.periods.index(period)
    lookup = {}
    for (o, d), rec in zip(truth.ride_stations[t], _truth_records(truth, t, records)):
        lookup[(rec.bike_id, rec.depart.latitude, rec.depart.longitude)] = o
        lookup[(rec.bike_id, rec.arrive.latitude, rec.arrive.longitude)] = d
    positions: PositionSet = cs.positions if cs.positions is not None else extract_positions(records)
    true = np.array([lookup[k] for k in positions.keys()])
    return pairwise_comembership_auc(cs.label, true)


def _truth_records(truth: GroundTruth, t: int, records: Sequence[TrajectoryRecord]):
    if len(records) != len(truth.ride_stations[t]):
        raise ContractError("bucket size differs from the ground-truth ride count")
    return records


def run_eval(cfg: PipelineConfig) -> dict:
    truth_path = cfg.path("truth", "ground_truth.json")
    truth = GroundTruth.from_json(_read_json(truth_path)) if truth_path.exists() else None
    partition = None
    if truth is not None and (Path(cfg.workdir) / "clusters").exists():
        partition, _ = load_partition(cfg)
    per_fold = []
    curves = ["region,fold,test_periods,auc,rmse_model,rmse_persistence"]
    all_auc = []
    for region, gs in _sequences(cfg).items():
        for fs in evaluate_sequence(gs, cfg):
            if partition is not None:
                aucs = []
                for p in fs.test_periods:
                    key = SpatioTemporalKey(region, p, cfg.granularity)
                    cpath = Path(cfg.workdir) / "clusters" / region / f"{p:06d}.json"
                    if key in partition.buckets and cpath.exists() and p in truth.periods:
                        cs = ClusterSet.from_json(_read_json(cpath))
                        aucs.append(clustering_auc(partition.buckets[key], cs, truth, p))
                fs.auc = float(np.mean(aucs)) if aucs else None
                if fs.auc is not None:
                    all_auc.append(fs.auc)
            per_fold.append({"region": region, **fs.__dict__})
            curves.append(
                f"{region},{fs.fold},{' '.join(map(str, fs.test_periods))},"
                f"{'' if fs.auc is None else repr(fs.auc)},{fs.rmse_model!r},{fs.rmse_persistence!r}"
            )
    report = {
        "auc": float(np.mean(all_auc)) if all_auc else None,
        "rmse_model": float(np.mean([f["rmse_model"] for f in per_fold])),
        "rmse_persistence": float(np.mean([f["rmse_persistence"] for f in per_fold])),
        "per_fold": per_fold,
    }
    out = Path(cfg.workdir) / "eval"
    _write_json(out / "metrics.json", report)
    _write(out / "curves.csv", "\n".join(curves) + "\n")
    return report


STAGES = {
    "synth": run_synth,
    "cluster": run_cluster,
    "graph": run_graph,
    "sequence": run_sequence,
    "train": run_train,
    "predict": run_predict,
    "recommend": run_recommend,
    "eval": run_eval,
}
PIPELINE_ORDER = ("cluster", "graph", "sequence", "train", "predict", "recommend", "eval")


def run_pipeline(cfg: PipelineConfig, with_synth: bool = False) -> dict:
    results = {}
    for stage in (("synth",) if with_synth else ()) + PIPELINE_ORDER:
        log.info("stage %s", stage)
        results[stage] = STAGES[stage](cfg)
    return results
