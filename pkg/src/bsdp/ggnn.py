"""Gated recurrent forecaster over encoded station-graph sequences.

Each period's graph is rasterised by a :class:`~bsdp.grid.GridCodec` into a
vector ``x_t`` in [0, 1]^D. A single GRU cell with a sigmoid read-out maps
``x_t`` (plus the carried hidden state) to ``y_t``, the forecast of
``x_{t+1}``. Every gate weight is stored as its input half ``W_*x`` and its
recurrent half ``W_*h``:

    r  = sigmoid(W_rh h + W_rx x + b_r)
    z  = sigmoid(W_zh h + W_zx x + b_z)
    h~ = tanh(W_hh (r * h) + W_hx x [+ b_h])
    h' = (1 - z) * h + z * h~
    y  = sigmoid(W_o h')

Training minimises ``0.5 * sum_t ||y_t - target_t||^2`` with plain gradient
descent; gradients come from hand-written backpropagation through time.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ContractError, NumericalError, TrainingError
from .geo import GeoPoint
from .graph import MIN_STATION_BIKES, GraphSequence, Station, StationGraph
from .grid import GridCodec

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
GATE_PARAMS = ("W_rx", "W_rh", "b_r", "W_zx", "W_zh", "b_z", "W_hx", "W_hh")


def sigmoid(a: np.ndarray) -> np.ndarray:
    return expit(a)


# -- encoding ---------------------------------------------------------------


def encode_graph(g: StationGraph, codec: GridCodec) -> np.ndarray:
    """Per-cell bike totals divided by ``cap_max`` and clipped to 1."""
    x = np.zeros(codec.dim, dtype=np.float64)
    for v in g.vertices:
        if not codec.contains(v.lat, v.lon):
            raise ContractError(f"station {v.station_id} at ({v.lat}, {v.lon}) is outside the codec box")
        x[codec.cell_index(v.lat, v.lon)] += v.bike_count
    return np.minimum(1.0, x / codec.cap_max)


def encode_sequence(gs: GraphSequence) -> np.ndarray:
    return np.stack([encode_graph(g, gs.codec) for g in gs.graphs])


def historical_anchors(gs: GraphSequence) -> dict[int, tuple[float, float]]:
    """Bike-weighted centroid of every cell's stations across the sequence."""
    acc: dict[int, list[float]] = {}
    for g in gs.graphs:
        for v in g.vertices:
            k = gs.codec.cell_index(v.lat, v.lon)
            s = acc.setdefault(k, [0.0, 0.0, 0.0])
            w = max(v.bike_count, 1)
            s[0] += v.lat * w
            s[1] += v.lon * w
            s[2] += w
    return {k: (s[0] / s[2], s[1] / s[2]) for k, s in acc.items()}


def decode_vector(
    y: np.ndarray,
    codec: GridCodec,
    anchors: Mapping[int, tuple[float, float]] | None = None,
    min_station_size: int = MIN_STATION_BIKES,
) -> StationGraph:
    """Turn a grid vector back into a vertices-only station graph.

    Cells whose rounded bike count reaches ``min_station_size`` become
    stations, placed at the cell's historical anchor when the codec asks for
    one and it exists, otherwise at the cell centre.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (codec.dim,):
        raise ContractError(f"vector of shape {y.shape} does not match a {codec.dim}-cell codec")
    if not np.all(np.isfinite(y)):
        raise NumericalError("cannot decode a non-finite prediction")
    counts = np.floor(y * codec.cap_max + 0.5).astype(np.int64)
    stations = []
    for k in np.flatnonzero(counts >= min_station_size):
        k = int(k)
        if codec.cell_anchor == "historical_centroid" and anchors and k in anchors:
            lat, lon = anchors[k]
        else:
            lat, lon = codec.cell_center(k)
        stations.append(Station(f"p{k}", GeoPoint(lat, lon), int(counts[k])))
    return StationGraph.from_stations(stations)


# -- model ------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.05
    rng_seed: int = 0
    init_scale: float = 0.1
    gradient_clip: float | None = 5.0
    hidden_dim: int = 32
    # steps per truncated-BPTT update; None backpropagates through the whole sequence
    bptt_window: int | None = 1
    candidate_bias: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not self.init_scale > 0:
            raise ConfigError("init_scale must be positive")
        if self.gradient_clip is not None and not self.gradient_clip > 0:
            raise ConfigError("gradient_clip must be positive or None")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        if self.bptt_window is not None and self.bptt_window < 1:
            raise ConfigError("bptt_window must be >= 1")


@dataclass
class GruModel:
    params: dict[str, np.ndarray]
    codec: GridCodec | None = None
    min_station_size: int = MIN_STATION_BIKES
    loss_history: list[float] = field(default_factory=list)

    @classmethod
    def initialise(
        cls,
        input_dim: int,
        hidden_dim: int,
        rng_seed: int = 0,
        init_scale: float = 0.1,
        candidate_bias: bool = False,
        codec: GridCodec | None = None,
    ) -> "GruModel":
        """Weights uniform in [-init_scale, init_scale], biases zero."""
        rng = np.random.default_rng(rng_seed)
        dx, dh = input_dim, hidden_dim

        def u(*shape: int) -> np.ndarray:
            return rng.uniform(-init_scale, init_scale, size=shape)

        params = {
            "W_rx": u(dh, dx), "W_rh": u(dh, dh), "b_r": np.zeros(dh),
            "W_zx": u(dh, dx), "W_zh": u(dh, dh), "b_z": np.zeros(dh),
            "W_hx": u(dh, dx), "W_hh": u(dh, dh),
            "W_o": u(dx, dh),
        }
        if candidate_bias:
            params["b_h"] = np.zeros(dh)
        return cls(params, codec)

    @property
    def input_dim(self) -> int:
        return self.params["W_rx"].shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.params["W_rh"].shape[0]

    @property
    def candidate_bias(self) -> bool:
        return "b_h" in self.params

    def validate(self) -> None:
        dx, dh = self.input_dim, self.hidden_dim
        expected = {
            "W_rx": (dh, dx), "W_rh": (dh, dh), "b_r": (dh,),
            "W_zx": (dh, dx), "W_zh": (dh, dh), "b_z": (dh,),
            "W_hx": (dh, dx), "W_hh": (dh, dh), "W_o": (dx, dh),
        }
        if self.candidate_bias:
            expected["b_h"] = (dh,)
        if set(self.params) != set(expected):
            raise ContractError(f"model parameters {sorted(self.params)} != {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ContractError(f"{name} has shape {self.params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise NumericalError(f"{name} contains non-finite values")
        if self.codec is not None and self.codec.dim != dx:
            raise ContractError(f"codec has {self.codec.dim} cells but the model expects {dx}")

    def copy(self) -> "GruModel":
        return GruModel({k: v.copy() for k, v in self.params.items()}, self.codec,
                        self.min_station_size, list(self.loss_history))

    def to_json(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "dims": {"input": self.input_dim, "hidden": self.hidden_dim},
            "candidate_bias": self.candidate_bias,
            "min_station_size": self.min_station_size,
            "codec": self.codec.to_json() if self.codec else None,
            "matrices": {
                k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                for k, v in sorted(self.params.items())
            },
            "loss_history": list(self.loss_history),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "GruModel":
        if data.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {data.get('version')!r}")
        params = {}
        for name, m in data["matrices"].items():
            arr = np.asarray(m["data"], dtype=np.float64)
            shape = tuple(int(s) for s in m["shape"])
            if arr.size != math.prod(shape):
                raise ContractError(f"{name}: {arr.size} values do not fill shape {shape}")
            params[name] = arr.reshape(shape)
        codec = GridCodec.from_json(data["codec"]) if data.get("codec") else None
        model = cls(params, codec, int(data.get("min_station_size", MIN_STATION_BIKES)),
                    [float(v) for v in data.get("loss_history", [])])
        model.validate()
        dims = data.get("dims", {})
        if dims and (dims.get("input"), dims.get("hidden")) != (model.input_dim, model.hidden_dim):
            raise ContractError("checkpoint dims disagree with its matrices")
        return model

    def dumps(self) -> str:
        return json.dumps(self.to_json())


class Step(NamedTuple):
    r: np.ndarray
    z: np.ndarray
    h_tilde: np.ndarray
    h: np.ndarray
    y: np.ndarray


def gru_step_forward(x: np.ndarray, h_prev: np.ndarray, model: GruModel) -> Step:
    p = model.params
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x.shape != (model.input_dim,) or h_prev.shape != (model.hidden_dim,):
        raise ContractError(
            f"step inputs x{x.shape}, h{h_prev.shape} do not match model "
            f"({model.input_dim}, {model.hidden_dim})"
        )
    r = sigmoid(p["W_rh"] @ h_prev + p["W_rx"] @ x + p["b_r"])
    z = sigmoid(p["W_zh"] @ h_prev + p["W_zx"] @ x + p["b_z"])
    a = p["W_hh"] @ (r * h_prev) + p["W_hx"] @ x
    if "b_h" in p:
        a = a + p["b_h"]
    h_tilde = np.tanh(a)
    h = (1.0 - z) * h_prev + z * h_tilde
    y = sigmoid(p["W_o"] @ h)
    return Step(r, z, h_tilde, h, y)


def forward_sequence(xs: np.ndarray, model: GruModel, h0: np.ndarray | None = None) -> list[Step]:
    h = np.zeros(model.hidden_dim) if h0 is None else np.asarray(h0, dtype=np.float64)
    steps = []
    for x in xs:
        step = gru_step_forward(x, h, model)
        steps.append(step)
        h = step.h
    return steps


def sequence_loss(
    xs: np.ndarray, targets: np.ndarray, model: GruModel,
    h0: np.ndarray | None = None, mask: np.ndarray | None = None,
) -> float:
    steps = forward_sequence(xs, model, h0)
    mask = np.ones(len(steps), bool) if mask is None else np.asarray(mask, bool)
    return 0.5 * sum(float(np.sum((s.y - t) ** 2)) for s, t, m in zip(steps, targets, mask) if m)


@dataclass
class Gradients:
    loss: float
    grads: dict[str, np.ndarray]
    h_last: np.ndarray


def gru_backward_gradients(
    xs: np.ndarray,
    targets: np.ndarray,
    model: GruModel,
    h0: np.ndarray | None = None,
    mask: np.ndarray | None = None,
) -> Gradients:
    """Gradients of ``0.5 * sum_t ||y_t - target_t||^2`` by backpropagation through time.

    Returned gradients point uphill (subtract them to descend). ``mask``
    drops individual steps from the loss while keeping them in the
    recurrence. The hidden-state error flowing in from beyond the last step
    is zero.
    """
    xs = np.asarray(xs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if xs.ndim != 2 or len(xs) < 1:
        raise ContractError("need a (T, D) input sequence with T >= 1")
    if targets.shape != (len(xs), model.input_dim):
        raise ContractError(f"targets shape {targets.shape} != {(len(xs), model.input_dim)}")
    mask = np.ones(len(xs), bool) if mask is None else np.asarray(mask, bool)
    p = model.params
    h0 = np.zeros(model.hidden_dim) if h0 is None else np.asarray(h0, dtype=np.float64)
    steps = forward_sequence(xs, model, h0)
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    loss = 0.0
    dh_next = np.zeros(model.hidden_dim)
    for t in range(len(xs) - 1, -1, -1):
        s = steps[t]
        h_prev = steps[t - 1].h if t > 0 else h0
        x = xs[t]
        if mask[t]:
            err = s.y - targets[t]
            loss += 0.5 * float(err @ err)
            d_ay = err * s.y * (1.0 - s.y)
            grads["W_o"] += np.outer(d_ay, s.h)
            dh = p["W_o"].T @ d_ay + dh_next
        else:
            dh = dh_next
        d_az = dh * (s.h_tilde - h_prev) * s.z * (1.0 - s.z)
        d_ac = dh * s.z * (1.0 - s.h_tilde ** 2)
        rh = s.r * h_prev
        grads["W_hh"] += np.outer(d_ac, rh)
        grads["W_hx"] += np.outer(d_ac, x)
        if "b_h" in grads:
            grads["b_h"] += d_ac
        d_rh = p["W_hh"].T @ d_ac
        d_ar = d_rh * h_prev * s.r * (1.0 - s.r)
        grads["W_zh"] += np.outer(d_az, h_prev)
        grads["W_zx"] += np.outer(d_az, x)
        grads["b_z"] += d_az
        grads["W_rh"] += np.outer(d_ar, h_prev)
        grads["W_rx"] += np.outer(d_ar, x)
        grads["b_r"] += d_ar
        dh_next = (
            dh * (1.0 - s.z)
            + d_rh * s.r
            + p["W_zh"].T @ d_az
            + p["W_rh"].T @ d_ar
        )
        if not (np.all(np.isfinite(dh_next)) and np.all(np.isfinite(d_az)) and np.all(np.isfinite(d_ar))):
            raise NumericalError("non-finite error signal during backpropagation", step=t)
    return Gradients(loss, grads, steps[-1].h)


def _clip(grads: dict[str, np.ndarray], limit: float | None) -> None:
    if limit is None:
        return
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > limit:
        scale = limit / norm
        for g in grads.values():
            g *= scale


def train_on_vectors(
    xs: np.ndarray,
    config: TrainConfig,
    target_mask: np.ndarray | None = None,
    codec: GridCodec | None = None,
    model: GruModel | None = None,
) -> GruModel:
    """Fit the GRU to predict ``xs[t + 1]`` from ``xs[:t + 1]``.

    The hidden state is carried through the sequence within an epoch and
    reset to zero at the start of each one. Parameters are updated after
    every ``bptt_window`` steps. ``target_mask[t]`` (length ``T - 1``)
    excludes the pair ``(xs[t], xs[t + 1])`` from the loss.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or len(xs) < 2:
        raise ContractError("training needs at least two periods")
    inputs, targets = xs[:-1], xs[1:]
    n_pairs = len(inputs)
    mask = np.ones(n_pairs, bool) if target_mask is None else np.asarray(target_mask, bool)
    if mask.shape != (n_pairs,):
        raise ContractError(f"target mask needs {n_pairs} entries")
    if model is None:
        model = GruModel.initialise(
            xs.shape[1], config.hidden_dim, config.rng_seed, config.init_scale,
            config.candidate_bias, codec,
        )
    window = config.bptt_window or n_pairs
    for epoch in range(config.epochs):
        h = np.zeros(model.hidden_dim)
        epoch_loss = 0.0
        for start in range(0, n_pairs, window):
            stop = min(n_pairs, start + window)
            try:
                g = gru_backward_gradients(inputs[start:stop], targets[start:stop], model, h, mask[start:stop])
            except NumericalError as exc:
                raise TrainingError(str(exc), epoch) from exc
            _clip(g.grads, config.gradient_clip)
            for name, grad in g.grads.items():
                model.params[name] -= config.learning_rate * grad
            epoch_loss += g.loss
            h = g.h_last
        if not math.isfinite(epoch_loss):
            raise TrainingError("loss diverged", epoch)
        model.loss_history.append(epoch_loss)
    for name, value in model.params.items():
        if not np.all(np.isfinite(value)):
            raise TrainingError(f"{name} became non-finite", config.epochs - 1)
    return model


def train_ggnn(gs: GraphSequence, config: TrainConfig, target_mask: np.ndarray | None = None) -> GruModel:
    """Train on an encoded graph sequence; the model keeps the sequence's codec."""
    if len(gs) < 2:
        raise ContractError("training needs a sequence of at least two periods")
    xs = encode_sequence(gs)
    model = train_on_vectors(xs, config, target_mask, codec=gs.codec)
    log.info("trained %s: loss %.4g -> %.4g", gs.region_id, model.loss_history[0], model.loss_history[-1])
    return model


def predict_vector(model: GruModel, xs: np.ndarray) -> np.ndarray:
    """Forecast of the period after ``xs[-1]``."""
    xs = np.asarray(xs, dtype=np.float64)
    if len(xs) == 0:
        raise ContractError("cannot predict from an empty sequence")
    model.validate()
    return forward_sequence(xs, model)[-1].y


def predict_next_graph(model: GruModel, gs: GraphSequence) -> StationGraph:
    """Run the whole history through the model and decode the final output."""
    if len(gs) == 0:
        raise ContractError("cannot predict from an empty sequence")
    codec = gs.codec
    if model.codec is not None and model.codec != codec:
        raise ContractError("model was trained with a different grid codec")
    y = predict_vector(model, encode_sequence(gs))
    return decode_vector(y, codec, historical_anchors(gs), model.min_station_size)
