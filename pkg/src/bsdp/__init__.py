"""Dynamic station planning for dockless bike sharing."""

from .cluster import ClusterParams, ClusterSet, cluster_drop_offs, compute_density_delta
from .errors import (
    BSDPError,
    ConfigError,
    ContractError,
    InvalidInputError,
    NumericalError,
    RecordError,
    TrainingError,
)
from .geo import GeoPoint, haversine_distance, haversine_matrix
from .ggnn import GruModel, TrainConfig, predict_next_graph, train_ggnn
from .graph import GraphSequence, Station, StationGraph, build_graph_sequence, build_station_graph, remove_inferior
from .grid import GridCodec
from .ingest import TrajectoryRecord, extract_positions, parse_trajectory_csv, partition_spatiotemporal
from .recommend import LayoutRecommendation, LegalPosition, fine_tune_layout
from .synth import SynthConfig, generate_synthetic_city

__version__ = "0.1.0"
