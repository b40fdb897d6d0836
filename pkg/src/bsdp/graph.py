"""Weighted station digraphs, inferior-station pruning and graph sequences."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .cluster import OUTLIER, ClusterSet
from .errors import ConfigError, ContractError, InvalidInputError
from .geo import GeoPoint, haversine_matrix
from .grid import GridCodec, fit_codec
from .ingest import TrajectoryRecord

log = logging.getLogger(__name__)

LEVELS = ("micro", "small", "medium", "large")
# lower bounds of the half-open bike-count bands
LEVEL_BOUNDS = (5, 10, 20, 30)
MIN_STATION_BIKES = LEVEL_BOUNDS[0]


def classify_station_level(n: int) -> str:
    """micro [5,10), small [10,20), medium [20,30), large [30, inf)."""
    if n < MIN_STATION_BIKES:
        raise InvalidInputError(f"{n} bikes is below the {MIN_STATION_BIKES}-bike station minimum")
    for level, upper in zip(LEVELS, LEVEL_BOUNDS[1:]):
        if n < upper:
            return level
    return LEVELS[-1]


@dataclass(frozen=True)
class Station:
    station_id: str
    location: GeoPoint
    bike_count: int
    level: str = ""

    def __post_init__(self) -> None:
        if self.bike_count < 0:
            raise InvalidInputError("negative bike count")
        if not self.level and self.bike_count >= MIN_STATION_BIKES:
            object.__setattr__(self, "level", classify_station_level(self.bike_count))

    @property
    def lat(self) -> float:
        return self.location.latitude

    @property
    def lon(self) -> float:
        return self.location.longitude


@dataclass(frozen=True, eq=False)
class StationGraph:
    """G = (V, E, D, W). ``weights`` keeps self-loop rides on its diagonal;
    they count towards throughput but are not edges."""

    vertices: tuple[Station, ...]
    weights: np.ndarray
    distances: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.vertices)
        w = np.asarray(self.weights, dtype=np.int64).reshape(n, n)
        d = np.asarray(self.distances, dtype=np.float64).reshape(n, n)
        if (w < 0).any():
            raise ContractError("negative ride count in W")
        w.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "vertices", tuple(self.vertices))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "distances", d)

    @classmethod
    def empty(cls) -> "StationGraph":
        return cls((), np.zeros((0, 0), np.int64), np.zeros((0, 0)))

    @classmethod
    def from_stations(cls, stations: Sequence[Station], weights: np.ndarray | None = None) -> "StationGraph":
        n = len(stations)
        coords = np.array([s.location.as_tuple() for s in stations], dtype=np.float64).reshape(n, 2)
        dist = haversine_matrix(coords, coords) if n else np.zeros((0, 0))
        dist = np.minimum(dist, dist.T)  # exact symmetry
        np.fill_diagonal(dist, 0.0)
        w = np.zeros((n, n), np.int64) if weights is None else weights
        return cls(tuple(stations), w, dist)

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def edges(self) -> list[tuple[int, int]]:
        w = self.weights.copy()
        np.fill_diagonal(w, 0)
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(w))]

    @property
    def total_throughput(self) -> int:
        return int(self.weights.sum())

    def throughput(self, i: int) -> int:
        return int(self.weights[i, :].sum() + self.weights[:, i].sum())

    @property
    def total_bikes(self) -> int:
        return sum(v.bike_count for v in self.vertices)

    def index_of(self, station_id: str) -> int:
        for k, v in enumerate(self.vertices):
            if v.station_id == station_id:
                return k
        raise KeyError(station_id)

    def subgraph(self, keep: Sequence[int]) -> "StationGraph":
        keep = np.asarray(keep, dtype=np.int64)
        return StationGraph(
            tuple(self.vertices[k] for k in keep),
            self.weights[np.ix_(keep, keep)],
            self.distances[np.ix_(keep, keep)],
        )

    def to_json(self) -> dict:
        ids = [v.station_id for v in self.vertices]
        return {
            "vertices": [
                {"id": v.station_id, "lat": v.lat, "lon": v.lon, "n": v.bike_count, "level": v.level}
                for v in self.vertices
            ],
            "edges": [
                {"from": ids[i], "to": ids[j], "w": int(self.weights[i, j]), "d_km": float(self.distances[i, j])}
                for i, j in self.edges
            ],
            "loops": [
                {"id": ids[i], "w": int(self.weights[i, i])}
                for i in range(len(ids))
                if self.weights[i, i] > 0
            ],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "StationGraph":
        stations = [
            Station(str(v["id"]), GeoPoint(float(v["lat"]), float(v["lon"])), int(v["n"]), v.get("level", ""))
            for v in data["vertices"]
        ]
        index = {s.station_id: k for k, s in enumerate(stations)}
        if len(index) != len(stations):
            raise ContractError("duplicate station ids in graph file")
        n = len(stations)
        w = np.zeros((n, n), np.int64)
        try:
            for e in data.get("edges", []):
                w[index[str(e["from"])], index[str(e["to"])]] = int(e["w"])
            for loop in data.get("loops", []):
                k = index[str(loop["id"])]
                w[k, k] = int(loop["w"])
        except KeyError as exc:
            raise ContractError(f"edge references unknown station {exc}") from None
        return cls.from_stations(stations, w)


def build_station_graph(
    clusters: ClusterSet,
    records: Sequence[TrajectoryRecord],
    snapshot: Sequence[GeoPoint] | None = None,
    snapshot_radius_km: float = 0.1,
    min_station_size: int = MIN_STATION_BIKES,
    id_prefix: str = "s",
) -> StationGraph:
    """One vertex per cluster, placed at its centre point, with ride counts as W.

    Each ride is attributed through its deduplicated (bike, lat, lon) entries,
    so rides whose pickup was merged into an earlier dropoff still count.
    Bike count is the number of dropoffs in the cluster; with a parked-bike
    ``snapshot`` it becomes snapshot + dropoffs - pickups (floored at 0).
    Clusters below ``min_station_size`` bikes get no vertex.
    """
    if clusters.positions is None:
        raise ContractError("cluster set carries no position table to attribute rides")
    if not clusters.centers:
        return StationGraph.empty()
    label_of = {key: int(lab) for key, lab in zip(clusters.positions.keys(), clusters.label)}
    k = clusters.n_clusters
    pick = np.full(len(records), OUTLIER, dtype=np.int64)
    drop = np.full(len(records), OUTLIER, dtype=np.int64)
    for r, rec in enumerate(records):
        pick[r] = label_of.get((rec.bike_id, rec.depart.latitude, rec.depart.longitude), OUTLIER)
        drop[r] = label_of.get((rec.bike_id, rec.arrive.latitude, rec.arrive.longitude), OUTLIER)

    n_bikes = np.bincount(drop[drop >= 0], minlength=k).astype(np.int64)
    if snapshot is not None:
        centers = clusters.coords[clusters.centers]
        parked = np.zeros(k, dtype=np.int64)
        if len(snapshot):
            pts = np.array([p.as_tuple() for p in snapshot])
            d = haversine_matrix(pts, centers)
            nearest = d.argmin(axis=1)
            ok = d[np.arange(len(pts)), nearest] <= snapshot_radius_km
            parked = np.bincount(nearest[ok], minlength=k)
        pickups = np.bincount(pick[pick >= 0], minlength=k)
        n_bikes = np.maximum(parked + n_bikes - pickups, 0)

    kept = np.flatnonzero(n_bikes >= min_station_size)
    remap = np.full(k, -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    stations = [
        Station(
            f"{id_prefix}{c}",
            GeoPoint(*map(float, clusters.coords[clusters.centers[c]])),
            int(n_bikes[c]),
        )
        for c in kept
    ]
    w = np.zeros((len(kept), len(kept)), dtype=np.int64)
    both = (pick >= 0) & (drop >= 0)
    i, j = remap[pick[both]], remap[drop[both]]
    ok = (i >= 0) & (j >= 0)
    np.add.at(w, (i[ok], j[ok]), 1)
    return StationGraph.from_stations(stations, w)


def station_revenue(g: StationGraph, i: int, alpha: float = 1.0) -> float:
    """Sum of w_ij * d_ij * alpha over the rides departing station ``i``."""
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    return float(np.dot(g.weights[i, :], g.distances[i, :]) * alpha)


def station_utility(g: StationGraph, i: int) -> float:
    tp_g = g.total_throughput
    if tp_g == 0:
        raise InvalidInputError("utility is undefined for a graph without rides")
    return g.throughput(i) / (2.0 * tp_g)


def revenues(g: StationGraph, alpha: float = 1.0) -> np.ndarray:
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    return (g.weights * g.distances).sum(axis=1) * alpha


def utilities(g: StationGraph) -> np.ndarray:
    tp_g = g.total_throughput
    if tp_g == 0:
        raise InvalidInputError("utility is undefined for a graph without rides")
    return (g.weights.sum(axis=1) + g.weights.sum(axis=0)) / (2.0 * tp_g)


@dataclass
class PruneResult:
    graph: StationGraph
    removed: list[str]
    theta_p: float
    theta_u: float


def remove_inferior(
    g: StationGraph,
    theta_p: float | None = None,
    theta_u: float | None = None,
    alpha: float = 1.0,
    percentile: float = 25.0,
) -> PruneResult:
    """Drop every station whose revenue AND utility both fall below threshold.

    Revenue and utility are evaluated once on the input graph; removal does
    not cascade. Missing thresholds default to the ``percentile`` of the
    observed values.
    """
    if len(g) == 0:
        return PruneResult(g, [], 0.0 if theta_p is None else theta_p, 0.0 if theta_u is None else theta_u)
    p = revenues(g, alpha)
    u = utilities(g) if g.total_throughput > 0 else np.zeros(len(g))
    tp = float(np.percentile(p, percentile)) if theta_p is None else float(theta_p)
    tu = float(np.percentile(u, percentile)) if theta_u is None else float(theta_u)
    if tp < 0 or tu < 0:
        raise ConfigError("thresholds must be non-negative")
    inferior = (p < tp) & (u < tu)
    keep = np.flatnonzero(~inferior)
    removed = [g.vertices[k].station_id for k in np.flatnonzero(inferior)]
    return PruneResult(g.subgraph(keep), removed, tp, tu)


@dataclass
class GraphSequence:
    region_id: str
    period_granularity: str
    periods: list[int]
    graphs: list[StationGraph]
    codec: GridCodec
    filled: list[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.graphs)

    def head(self, length: int) -> "GraphSequence":
        """The first ``length`` periods, sharing this sequence's codec."""
        return GraphSequence(
            self.region_id, self.period_granularity, self.periods[:length],
            self.graphs[:length], self.codec, self.filled[:length],
        )

    def to_json(self) -> dict:
        return {
            "region_id": self.region_id,
            "granularity": self.period_granularity,
            "periods": list(self.periods),
            "filled": list(self.filled),
            "codec": self.codec.to_json(),
            "graphs": [g.to_json() for g in self.graphs],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "GraphSequence":
        graphs = [StationGraph.from_json(g) for g in data["graphs"]]
        periods = [int(p) for p in data["periods"]]
        if len(periods) != len(graphs) or any(b != a + 1 for a, b in zip(periods, periods[1:])):
            raise ContractError("sequence periods must be consecutive and match the graphs")
        return cls(
            str(data["region_id"]),
            str(data["granularity"]),
            periods,
            graphs,
            GridCodec.from_json(data["codec"]),
            [bool(f) for f in data.get("filled", [False] * len(graphs))],
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def build_graph_sequence(
    graphs: Mapping[int, StationGraph],
    region_id: str,
    granularity: str = "day",
    rows: int = 16,
    cols: int = 16,
    cap_max: float | None = None,
    cell_anchor: str = "historical_centroid",
) -> GraphSequence:
    """Order per-period graphs, fill missing periods with flagged empty graphs,
    and fit the shared grid codec over every vertex."""
    if len(graphs) < 2:
        raise InvalidInputError("a graph sequence needs at least two periods of history")
    first, last = min(graphs), max(graphs)
    periods = list(range(first, last + 1))
    seq = [graphs.get(p, StationGraph.empty()) for p in periods]
    filled = [p not in graphs for p in periods]
    if any(filled):
        log.info("region %s: %d empty periods inserted", region_id, sum(filled))
    per_period = [[(v.lat, v.lon, v.bike_count) for v in g.vertices] for g in seq]
    everything = [s for group in per_period for s in group]
    if not everything:
        raise InvalidInputError(f"region {region_id} has no stations in any period")
    codec = fit_codec(everything, rows, cols, cap_max, cell_anchor, periods=per_period)
    return GraphSequence(region_id, granularity, periods, seq, codec, filled)
