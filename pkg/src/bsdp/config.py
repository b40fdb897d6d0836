"""Pipeline configuration: a plain ``key = value`` file plus overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .cluster import ClusterParams
from .errors import ConfigError
from .ggnn import TrainConfig
from .synth import SynthConfig

ENV_VAR = "BSDP_CONFIG"


@dataclass
class PipelineConfig:
    workdir: str = "bsdp-out"
    trajectories: str = ""
    regions: str = ""
    legal_positions: str = ""
    truth: str = ""
    seed: int = 0
    jobs: int = 1
    strict: bool = False
    granularity: str = "day"
    # clustering
    cutoff_km: float = 0.1
    rho_fraction: float = 1.0 / 3.0
    delta_fraction: float = 1.0 / 3.0
    rho_threshold: float | None = None
    delta_threshold: float | None = None
    min_station_size: int = 5
    # graph
    alpha: float = 1.0
    theta_p: float | None = None
    theta_u: float | None = None
    inferior_percentile: float = 25.0
    # codec and model
    grid_rows: int = 16
    grid_cols: int = 16
    cap_max: float | None = None
    cell_anchor: str = "historical_centroid"
    epochs: int = 200
    learning_rate: float = 0.05
    hidden_dim: int = 32
    init_scale: float = 0.1
    gradient_clip: float | None = 5.0
    bptt_window: int | None = 1
    candidate_bias: bool = False
    # recommendation and evaluation
    theta_d: float = 0.05
    folds: int = 5
    # synthetic city
    synth_n_stations: int = 30
    synth_rides_per_period: int = 500
    synth_n_periods: int = 10
    synth_drift: str = "constant"
    synth_amplitude: int = 5
    synth_noise_km: float = 0.02
    synth_min_separation_km: float | None = 0.4
    synth_bbox: tuple[float, float, float, float] = (39.88, 39.94, 116.38, 116.45)
    synth_capacity: tuple[int, int] = (10, 30)
    synth_start_date: str = "2018-10-01"
    synth_legal_extra: int = 10

    def path(self, name: str, default: str) -> Path:
        value = getattr(self, name)
        return Path(value) if value else Path(self.workdir) / default

    def cluster_params(self) -> ClusterParams:
        return ClusterParams(
            cutoff_distance=self.cutoff_km,
            rho_threshold_fraction=self.rho_fraction,
            delta_threshold_fraction=self.delta_fraction,
            min_station_size=self.min_station_size,
            rho_threshold=self.rho_threshold,
            delta_threshold=self.delta_threshold,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            rng_seed=self.seed,
            init_scale=self.init_scale,
            gradient_clip=self.gradient_clip,
            hidden_dim=self.hidden_dim,
            bptt_window=self.bptt_window,
            candidate_bias=self.candidate_bias,
        )

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            rng_seed=self.seed,
            bbox=self.synth_bbox,
            n_stations=self.synth_n_stations,
            capacity_range=self.synth_capacity,
            rides_per_period=self.synth_rides_per_period,
            drift=self.synth_drift,
            drift_amplitude=self.synth_amplitude,
            gps_noise_km=self.synth_noise_km,
            n_periods=self.synth_n_periods,
            granularity=self.granularity,
            start_date=self.synth_start_date,
            min_separation_km=self.synth_min_separation_km,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                value = "none"
            elif isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(name: str, raw: str) -> Any:
    kind = str(_TYPES[name])
    text = raw.strip()
    optional = "None" in kind
    if optional and text.lower() in ("none", "auto", ""):
        return None
    try:
        if kind.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind.startswith("tuple[float"):
            return tuple(float(v) for v in text.split(","))
        if kind.startswith("tuple[int"):
            return tuple(int(v) for v in text.split(","))
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config_text(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config(path: str | os.PathLike | None, overrides: Mapping[str, str] | None = None) -> PipelineConfig:
    """Read the config file (or ``$BSDP_CONFIG``) and apply string overrides on top."""
    values: dict[str, Any] = {}
    path = path or os.environ.get(ENV_VAR)
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(encoding="utf-8")))
    for key, raw in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown setting {key!r}")
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    return dataclasses.replace(PipelineConfig(), **values)
