"""Density-peak clustering of drop-off positions into candidate stations.

Every point gets a local density (neighbours strictly closer than the cutoff)
and a delta distance (distance to the nearest point ranked above it). Points
are ranked by density, ties going to the lower index, so "higher density" is
a strict total order and the assignment chains always terminate.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidInputError
from .geo import Metric, haversine_matrix
from .ingest import PositionSet

log = logging.getLogger(__name__)

OUTLIER = -1
# distance-block budget (matrix entries) per chunk
_BLOCK_ENTRIES = 1 << 22


@dataclass(frozen=True)
class ClusterParams:
    """Clustering knobs.

    ``rho_threshold`` / ``delta_threshold`` are absolute overrides; when left
    as ``None`` the thresholds are the given fractions of the observed maxima.
    """

    cutoff_distance: float = 0.1
    rho_threshold_fraction: float = 1.0 / 3.0
    delta_threshold_fraction: float = 1.0 / 3.0
    min_station_size: int = 5
    rho_threshold: float | None = None
    delta_threshold: float | None = None

    def __post_init__(self) -> None:
        if not self.cutoff_distance > 0:
            raise ConfigError("cutoff distance must be positive")
        for name in ("rho_threshold_fraction", "delta_threshold_fraction"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {value}")
        if self.min_station_size < 1:
            raise ConfigError("min_station_size must be >= 1")

    def thresholds(self, rho: np.ndarray, delta: np.ndarray) -> tuple[float, float]:
        theta_rho = (
            self.rho_threshold
            if self.rho_threshold is not None
            else float(np.max(rho)) * self.rho_threshold_fraction
        )
        theta_delta = (
            self.delta_threshold
            if self.delta_threshold is not None
            else float(np.max(delta)) * self.delta_threshold_fraction
        )
        return theta_rho, theta_delta


def _block_rows(n: int) -> int:
    return max(1, min(n, _BLOCK_ENTRIES // max(n, 1)))


def density_rank(rho: np.ndarray) -> np.ndarray:
    """Point indices from highest to lowest density, lower index first on ties."""
    rho = np.asarray(rho)
    return np.lexsort((np.arange(len(rho)), -rho))


def compute_density_delta(
    points: np.ndarray, cutoff_distance: float, metric: Metric = haversine_matrix
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Local density, delta distance and nearest-higher index for every point.

    ``nearest_higher`` is -1 for the top-ranked point, whose delta is its
    largest distance to any point. Among equidistant higher-ranked
    neighbours the one ranked highest wins.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        raise InvalidInputError("cannot cluster an empty point set")
    rho = np.zeros(n, dtype=np.int64)
    step = _block_rows(n)
    # upper triangle only: each unordered pair is counted once for each end
    for s in range(0, n, step):
        e = min(n, s + step)
        d = metric(points[s:e], points[s:])
        rows = np.arange(e - s)[:, None]
        cols = np.arange(n - s)[None, :]
        close = (d < cutoff_distance) & (cols > rows)
        rho[s:e] += close.sum(axis=1)
        rho[s:] += close.sum(axis=0)

    order = density_rank(rho)
    ranked = points[order]
    delta_sorted = np.empty(n, dtype=np.float64)
    nh_sorted = np.full(n, -1, dtype=np.int64)
    for s in range(0, n, step):
        e = min(n, s + step)
        if e <= 1:
            continue
        lo = max(s, 1)
        d = metric(ranked[lo:e], ranked[:e])
        rows = np.arange(lo, e)[:, None]
        cols = np.arange(e)[None, :]
        d[cols >= rows] = np.inf
        arg = np.argmin(d, axis=1)
        delta_sorted[lo:e] = d[np.arange(e - lo), arg]
        nh_sorted[lo:e] = arg
    delta_sorted[0] = float(metric(ranked[:1], points).max())

    delta = np.empty(n, dtype=np.float64)
    delta[order] = delta_sorted
    nearest_higher = np.full(n, -1, dtype=np.int64)
    has = nh_sorted >= 0
    nearest_higher[order[has]] = order[nh_sorted[has]]
    return rho, delta, nearest_higher


def detect_centers_outliers(
    rho: np.ndarray, delta: np.ndarray, params: ClusterParams
) -> tuple[np.ndarray, np.ndarray]:
    """Indices of cluster centres (high rho and high delta) and outliers (low rho, high delta).

    When all deltas are zero (every point at one location) the delta test is
    vacuous and the top-ranked point alone heads the cluster.
    """
    rho = np.asarray(rho)
    delta = np.asarray(delta)
    if rho.shape != delta.shape:
        raise InvalidInputError("rho and delta lengths differ")
    theta_rho, theta_delta = params.thresholds(rho, delta)
    if len(delta) and float(np.max(delta)) == 0.0:
        # every point coincides: the set is one cluster headed by the top-ranked point
        head = int(density_rank(rho)[0])
        centers = np.array([head] if rho[head] > theta_rho else [], dtype=np.int64)
        return centers, np.array([], dtype=np.int64)
    high_delta = delta > theta_delta
    centers = np.flatnonzero((rho > theta_rho) & high_delta)
    outliers = np.flatnonzero((rho <= theta_rho) & high_delta)
    return centers, outliers


@dataclass
class ClusterSet:
    coords: np.ndarray
    rho: np.ndarray
    delta: np.ndarray
    nearest_higher: np.ndarray
    label: np.ndarray
    centers: list[int]
    positions: PositionSet | None = None
    thresholds: tuple[float, float] = (0.0, 0.0)
    warning: str | None = None
    outliers: list[int] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return len(self.centers)

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.label == cluster)

    def to_json(self) -> dict:
        return {
            "points": self.coords.tolist(),
            "rho": self.rho.tolist(),
            "delta": self.delta.tolist(),
            "label": self.label.tolist(),
            "centers": list(self.centers),
        }

    @classmethod
    def from_json(cls, data: dict) -> "ClusterSet":
        coords = np.asarray(data["points"], dtype=np.float64).reshape(-1, 2)
        rho = np.asarray(data["rho"], dtype=np.int64)
        delta = np.asarray(data["delta"], dtype=np.float64)
        label = np.asarray(data["label"], dtype=np.int64)
        if not (len(coords) == len(rho) == len(delta) == len(label)):
            raise InvalidInputError("cluster file arrays have inconsistent lengths")
        return cls(
            coords=coords,
            rho=rho,
            delta=delta,
            nearest_higher=np.full(len(rho), -1, dtype=np.int64),
            label=label,
            centers=[int(c) for c in data["centers"]],
        )

    def decision_graph_csv(self) -> str:
        center_set = set(self.centers)
        outlier_set = set(self.outliers)
        buf = io.StringIO()
        buf.write("index,rho,delta,label,role\n")
        for i in range(len(self.rho)):
            role = "center" if i in center_set else "outlier" if i in outlier_set else "member"
            buf.write(f"{i},{int(self.rho[i])},{float(self.delta[i])!r},{int(self.label[i])},{role}\n")
        return buf.getvalue()


def cluster_drop_offs(
    positions: PositionSet | np.ndarray,
    params: ClusterParams | None = None,
    metric: Metric = haversine_matrix,
) -> ClusterSet:
    """Cluster positions end to end.

    Points are labelled in density order: centres open a new cluster,
    outliers get :data:`OUTLIER`, everything else copies the label of its
    nearest higher-density neighbour (so a chain ending in an outlier stays
    an outlier). Clusters with fewer than ``min_station_size`` members are
    dissolved into outliers and the survivors renumbered in centre order.
    """
    params = params or ClusterParams()
    if isinstance(positions, PositionSet):
        coords, source = positions.coords, positions
    else:
        coords, source = np.asarray(positions, dtype=np.float64), None
    if len(coords) == 0:
        raise InvalidInputError("cannot cluster an empty point set")

    rho, delta, nearest_higher = compute_density_delta(coords, params.cutoff_distance, metric)
    centers, outliers = detect_centers_outliers(rho, delta, params)
    thresholds = params.thresholds(rho, delta)
    n = len(coords)
    label = np.full(n, OUTLIER, dtype=np.int64)
    if len(centers) == 0:
        log.warning("no point qualifies as a cluster centre; everything is an outlier")
        return ClusterSet(
            coords, rho, delta, nearest_higher, label, [], source, thresholds,
            warning="no cluster centres", outliers=outliers.tolist(),
        )

    is_center = np.zeros(n, dtype=bool)
    is_center[centers] = True
    is_outlier = np.zeros(n, dtype=bool)
    is_outlier[outliers] = True
    next_id = 0
    center_of: list[int] = []
    for i in density_rank(rho):
        if is_center[i]:
            label[i] = next_id
            center_of.append(int(i))
            next_id += 1
        elif not is_outlier[i] and nearest_higher[i] >= 0:
            label[i] = label[nearest_higher[i]]

    sizes = np.bincount(label[label >= 0], minlength=next_id)
    keep = sizes >= params.min_station_size
    remap = np.full(next_id, OUTLIER, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    label = np.where(label >= 0, remap[np.maximum(label, 0)], OUTLIER)
    kept_centers = [c for c, k in zip(center_of, keep) if k]
    warning = None
    if not kept_centers:
        warning = "all clusters smaller than min_station_size"
        log.warning(warning)
    return ClusterSet(
        coords, rho, delta, nearest_higher, label, kept_centers, source, thresholds,
        warning=warning, outliers=outliers.tolist(),
    )


def dump_cluster_set(cs: ClusterSet) -> str:
    return json.dumps(cs.to_json())
