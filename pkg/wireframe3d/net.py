"""Fully connected networks trained from scratch with numpy.

Three networks share the same machinery: the interpreter mapping flattened
heatmaps to standardized parameter vectors, the bottleneck refiner cleaning
noisy heatmaps, and the interpreter fine-tuned through the projection layer
with 2D keypoint supervision only.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, BinaryIO, Callable, NamedTuple, Sequence

import numpy as np
from numpy.typing import NDArray

from wireframe3d.camera import (
    INV_F,
    ParamVector,
    param_layout,
    param_size,
    project_skeleton,
    projection_jacobian,
)
from wireframe3d.core import (
    DatasetFormatError,
    DepthSingularity,
    DimensionError,
    TrainingAborted,
    TrainingDiverged,
    make_rng,
)
from wireframe3d.skeleton import BaseShapeSet
from wireframe3d.synth import (
    HeatmapStack,
    SamplerConfig,
    SynthSample,
    corrupt_salt_pepper,
)

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"3DINNW01"
ACTIVATION_CODES = {"linear": 0, "relu": 1}
ACTIVATIONS_BY_CODE = {code: name for name, code in ACTIVATION_CODES.items()}

INTERPRETER_WIDTHS = (256, 128, 64)
FULL_INTERPRETER_WIDTHS = (2048, 512, 128)
REFINER_WIDTHS = (512, 128, 512)
FULL_REFINER_WIDTHS = (8192, 4096, 8192)

Matrix = NDArray[np.float64]


@dataclass(frozen=True)
class DenseLayer:
    weights: Matrix  # out x in
    bias: Matrix
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATION_CODES:
            raise DimensionError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"layer shapes do not match: weights {self.weights.shape}, bias {self.bias.shape}"
            )


@dataclass(frozen=True)
class DenseNet:
    layers: tuple[DenseLayer, ...]

    def __post_init__(self) -> None:
        if not self.layers:
            raise DimensionError("a network needs at least one layer")
        for i, (prev, layer) in enumerate(zip(self.layers, self.layers[1:]), start=1):
            if layer.weights.shape[1] != prev.weights.shape[0]:
                raise DimensionError(
                    f"layer {i} expects {layer.weights.shape[1]} inputs, "
                    f"previous layer has {prev.weights.shape[0]} outputs"
                )
        for i, layer in enumerate(self.layers):
            if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.bias))):
                raise DimensionError(f"layer {i} has non-finite parameters")

    @property
    def input_dim(self) -> int:
        return int(self.layers[0].weights.shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.layers[-1].weights.shape[0])

    @classmethod
    def initialize(
        cls, input_dim: int, widths: Sequence[int], rng: np.random.Generator
    ) -> DenseNet:
        """ReLU hidden layers of ``widths[:-1]`` and a linear output layer of ``widths[-1]``.

        Weights are drawn uniformly from ``+-sqrt(6 / (fan_in + fan_out))``,
        biases start at zero.
        """
        layers = []
        fan_in = input_dim
        for i, width in enumerate(widths):
            limit = math.sqrt(6.0 / (fan_in + width))
            layers.append(
                DenseLayer(
                    weights=rng.uniform(-limit, limit, size=(width, fan_in)),
                    bias=np.zeros(width),
                    activation="linear" if i == len(widths) - 1 else "relu",
                )
            )
            fan_in = width
        return cls(tuple(layers))

    def with_parameters(self, weights: Sequence[Matrix], biases: Sequence[Matrix]) -> DenseNet:
        return DenseNet(
            tuple(
                DenseLayer(w, b, layer.activation)
                for layer, w, b in zip(self.layers, weights, biases)
            )
        )


class Gradients(NamedTuple):
    weights: list[Matrix]
    biases: list[Matrix]
    inputs: Matrix


@dataclass(frozen=True)
class Normalizer:
    mean: Matrix
    std: Matrix

    def __post_init__(self) -> None:
        object.__setattr__(self, "std", np.maximum(np.asarray(self.std, dtype=np.float64), 1e-8))

    @classmethod
    def from_targets(cls, targets: Matrix) -> Normalizer:
        return cls(mean=targets.mean(axis=0), std=targets.std(axis=0))

    @classmethod
    def from_sampler(cls, cfg: SamplerConfig, k: int) -> Normalizer:
        """Moments of the uniform sampling ranges, for models trained without 3D targets."""
        ranges = [cfg.alpha_range] * (k - 1) + [
            cfg.azimuth_range,
            cfg.elevation_range,
            cfg.tilt_range,
            cfg.tx_range,
            cfg.ty_range,
            cfg.tz_range,
            cfg.inv_f_range,
        ]
        bounds = np.array(ranges)
        return cls(mean=bounds.mean(axis=1), std=(bounds[:, 1] - bounds[:, 0]) / math.sqrt(12))

    def normalize(self, s: Matrix) -> Matrix:
        return (s - self.mean) / self.std

    def denormalize(self, z: Matrix) -> Matrix:
        return z * self.std + self.mean


@dataclass(frozen=True)
class TrainConfig:
    interpreter_widths: tuple[int, ...] = INTERPRETER_WIDTHS
    refiner_widths: tuple[int, ...] = REFINER_WIDTHS
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.5
    lr_decay_epochs: int = 20
    epochs: int = 60
    validation_fraction: float = 0.1
    loss_weights: tuple[float, ...] | None = None
    refiner_noise_levels: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3)
    max_skip_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        positive = {
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "lr_decay_epochs": self.lr_decay_epochs,
        }
        for name, value in positive.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1 or not 0 < self.lr_decay <= 1:
            raise ValueError("learning rate must be >= 0, momentum in [0, 1), decay in (0, 1]")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")
        if any(w < 1 for w in (*self.interpreter_widths, *self.refiner_widths)):
            raise ValueError("layer widths must be positive")

    @classmethod
    def full_scale(cls, **overrides: Any) -> TrainConfig:
        """Layer widths used for the full-size heatmap networks."""
        values: dict[str, Any] = {
            "interpreter_widths": FULL_INTERPRETER_WIDTHS,
            "refiner_widths": FULL_REFINER_WIDTHS,
        }
        values.update(overrides)
        return replace(cls(), **values)

    def learning_rate_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_decay_epochs)

    def to_dict(self) -> dict[str, Any]:
        return {
            key: list(value) if isinstance(value, tuple) else value
            for key, value in dataclasses.asdict(self).items()
        }


class TrainHistory(NamedTuple):
    train_loss: list[float]
    validation_loss: list[float]


class Interpreter(NamedTuple):
    net: DenseNet
    normalizer: Normalizer
    history: TrainHistory


class _Trace(NamedTuple):
    inputs: list[Matrix]
    pre_activations: list[Matrix]


def _as_batch(net: DenseNet, inputs: Matrix) -> Matrix:
    batch = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if batch.shape[1] != net.input_dim:
        raise DimensionError(f"network expects {net.input_dim} inputs, got {batch.shape[1]}")
    return batch


def _forward_trace(net: DenseNet, batch: Matrix) -> tuple[Matrix, _Trace]:
    trace = _Trace([], [])
    activations = batch
    for layer in net.layers:
        trace.inputs.append(activations)
        z = activations @ layer.weights.T + layer.bias
        trace.pre_activations.append(z)
        activations = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return activations, trace


def forward(net: DenseNet, inputs: Matrix) -> Matrix:
    """Evaluate the network on one input vector or a batch of row vectors."""
    single = np.ndim(inputs) == 1
    outputs, _ = _forward_trace(net, _as_batch(net, inputs))
    return outputs[0] if single else outputs


def _backward_trace(net: DenseNet, trace: _Trace, loss_grad: Matrix) -> Gradients:
    grad = loss_grad
    weight_grads: list[Matrix] = []
    bias_grads: list[Matrix] = []
    for layer, layer_input, z in zip(
        reversed(net.layers), reversed(trace.inputs), reversed(trace.pre_activations)
    ):
        if layer.activation == "relu":
            grad = grad * (z > 0)
        weight_grads.append(grad.T @ layer_input)
        bias_grads.append(grad.sum(axis=0))
        grad = grad @ layer.weights
    return Gradients(weights=weight_grads[::-1], biases=bias_grads[::-1], inputs=grad)


def backward(net: DenseNet, inputs: Matrix, loss_grad: Matrix) -> Gradients:
    """Parameter gradients of ``sum(loss_grad * forward(net, inputs))``, summed over the batch."""
    batch = _as_batch(net, inputs)
    loss_grad = np.atleast_2d(np.asarray(loss_grad, dtype=np.float64))
    if loss_grad.shape != (batch.shape[0], net.output_dim):
        raise DimensionError(
            f"loss gradient has shape {loss_grad.shape}, expected {(batch.shape[0], net.output_dim)}"
        )
    _, trace = _forward_trace(net, batch)
    return _backward_trace(net, trace, loss_grad)


LossFn = Callable[[DenseNet, NDArray[np.int64]], "tuple[float, Gradients, int]"]
ValidationFn = Callable[[DenseNet], float]


def _split(count: int, fraction: float, rng: np.random.Generator) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    order = rng.permutation(count)
    n_val = int(round(count * fraction)) if count > 1 else 0
    n_val = min(n_val, count - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _run_sgd(
    net: DenseNet,
    train_idx: NDArray[np.int64],
    loss_fn: LossFn,
    validation_fn: ValidationFn,
    cfg: TrainConfig,
    rng: np.random.Generator,
    label: str,
) -> tuple[DenseNet, TrainHistory]:
    """Mini-batch SGD with momentum and step decay, returning the best-validation weights."""
    weights = [layer.weights.copy() for layer in net.layers]
    biases = [layer.bias.copy() for layer in net.layers]
    weight_velocity = [np.zeros_like(w) for w in weights]
    bias_velocity = [np.zeros_like(b) for b in biases]

    best_net = net
    best_val = validation_fn(net)
    history = TrainHistory([], [])
    last_finite: float | None = None

    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate_at(epoch)
        order = train_idx[rng.permutation(train_idx.size)]
        epoch_loss, epoch_count, skipped = 0.0, 0, 0
        for start in range(0, order.size, cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            current = net.with_parameters(weights, biases)
            loss, grads, batch_skipped = loss_fn(current, batch_idx)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch + 1, last_finite)
            last_finite = loss
            skipped += batch_skipped
            epoch_loss += loss * batch_idx.size
            epoch_count += batch_idx.size
            for i in range(len(weights)):
                weight_velocity[i] = cfg.momentum * weight_velocity[i] - lr * grads.weights[i]
                bias_velocity[i] = cfg.momentum * bias_velocity[i] - lr * grads.biases[i]
                weights[i] = weights[i] + weight_velocity[i]
                biases[i] = biases[i] + bias_velocity[i]
            if not all(np.all(np.isfinite(p)) for p in (*weights, *biases)):
                raise TrainingDiverged(epoch + 1, last_finite)

        if skipped > cfg.max_skip_fraction * order.size:
            raise TrainingAborted(
                f"{label}: {skipped} of {order.size} samples crossed the camera plane in epoch {epoch + 1}"
            )
        if skipped:
            logger.warning("%s: skipped %d samples behind the camera in epoch %d", label, skipped, epoch + 1)

        train_loss = epoch_loss / max(epoch_count, 1)
        net_epoch = net.with_parameters(weights, biases)
        val_loss = validation_fn(net_epoch)
        history.train_loss.append(train_loss)
        history.validation_loss.append(val_loss)
        logger.info(
            "%s epoch %d/%d: train %.6g, validation %.6g (lr %.3g)",
            label, epoch + 1, cfg.epochs, train_loss, val_loss, lr,
        )
        if val_loss <= best_val:
            best_val, best_net = val_loss, net_epoch

    return best_net, history


def _heatmap_matrix(samples: Sequence[SynthSample], refiner: DenseNet | None = None) -> NDArray[np.float32]:
    inputs = np.stack([s.heatmaps.flatten() for s in samples]).astype(np.float32)
    if refiner is not None:
        inputs = np.clip(forward(refiner, inputs), 0.0, 1.0).astype(np.float32)
    return inputs


def _weights_vector(cfg: TrainConfig, size: int) -> Matrix:
    if cfg.loss_weights is None:
        return np.ones(size)
    if len(cfg.loss_weights) != size:
        raise DimensionError(f"loss_weights has {len(cfg.loss_weights)} entries, expected {size}")
    return np.asarray(cfg.loss_weights, dtype=np.float64)


def _mse_loss(
    net: DenseNet, inputs: NDArray[np.float32], targets: Matrix, weights: Matrix
) -> tuple[float, Gradients]:
    outputs, trace = _forward_trace(net, inputs.astype(np.float64))
    diff = outputs - targets
    loss = float(np.mean(weights * diff**2))
    loss_grad = 2.0 * weights * diff / diff.size
    return loss, _backward_trace(net, trace, loss_grad)


def _mse(net: DenseNet, inputs: NDArray[np.float32], targets: Matrix, weights: Matrix) -> float:
    if len(inputs) == 0:
        return 0.0
    outputs = forward(net, inputs.astype(np.float64))
    return float(np.mean(weights * (outputs - targets) ** 2))


def train_interpreter(
    samples: Sequence[SynthSample],
    cfg: TrainConfig | None = None,
    refiner: DenseNet | None = None,
) -> Interpreter:
    """Regress standardized parameter vectors from flattened heatmaps."""
    cfg = cfg or TrainConfig()
    if not samples:
        raise ValueError("training set is empty")
    rng = make_rng(cfg.seed, 2)
    inputs = _heatmap_matrix(samples, refiner)
    targets_raw = np.stack([s.s_true.to_array() for s in samples])
    train_idx, val_idx = _split(len(samples), cfg.validation_fraction, rng)
    normalizer = Normalizer.from_targets(targets_raw[train_idx])
    targets = normalizer.normalize(targets_raw)
    weights = _weights_vector(cfg, targets.shape[1])
    monitor_idx = val_idx if val_idx.size else train_idx

    net = DenseNet.initialize(inputs.shape[1], (*cfg.interpreter_widths, targets.shape[1]), rng)

    def loss_fn(current: DenseNet, batch_idx: NDArray[np.int64]) -> tuple[float, Gradients, int]:
        loss, grads = _mse_loss(current, inputs[batch_idx], targets[batch_idx], weights)
        return loss, grads, 0

    def validation_fn(current: DenseNet) -> float:
        return _mse(current, inputs[monitor_idx], targets[monitor_idx], weights)

    net, history = _run_sgd(net, train_idx, loss_fn, validation_fn, cfg, rng, "interpreter")
    return Interpreter(net=net, normalizer=normalizer, history=history)


def train_refiner(samples: Sequence[SynthSample], cfg: TrainConfig | None = None) -> tuple[DenseNet, TrainHistory]:
    """Train the bottleneck network mapping corrupted heatmaps back to clean ones."""
    cfg = cfg or TrainConfig()
    if not samples:
        raise ValueError("training set is empty")
    rng = make_rng(cfg.seed, 3)
    levels = cfg.refiner_noise_levels
    clean = _heatmap_matrix(samples)
    noisy = np.stack(
        [
            corrupt_salt_pepper(s.heatmaps, levels[i % len(levels)], make_rng(cfg.seed, 31, i)).flatten()
            for i, s in enumerate(samples)
        ]
    ).astype(np.float32)
    targets = clean.astype(np.float64)
    weights = np.ones(clean.shape[1])
    train_idx, val_idx = _split(len(samples), cfg.validation_fraction, rng)
    monitor_idx = val_idx if val_idx.size else train_idx

    net = DenseNet.initialize(clean.shape[1], (*cfg.refiner_widths, clean.shape[1]), rng)

    def loss_fn(current: DenseNet, batch_idx: NDArray[np.int64]) -> tuple[float, Gradients, int]:
        loss, grads = _mse_loss(current, noisy[batch_idx], targets[batch_idx], weights)
        return loss, grads, 0

    def validation_fn(current: DenseNet) -> float:
        return _mse(current, noisy[monitor_idx], targets[monitor_idx], weights)

    return _run_sgd(net, train_idx, loss_fn, validation_fn, cfg, rng, "refiner")


def refine(refiner: DenseNet, h: HeatmapStack) -> HeatmapStack:
    """Clean a heatmap stack with a trained refiner; outputs are clamped to ``[0, 1]``."""
    if refiner.input_dim != h.maps.size:
        raise DimensionError(f"refiner expects {refiner.input_dim} heatmap cells, got {h.maps.size}")
    maps = np.clip(forward(refiner, h.flatten()), 0.0, 1.0).reshape(h.maps.shape)
    return HeatmapStack(maps, cell_size=h.cell_size)


def projection_loss(
    net: DenseNet,
    normalizer: Normalizer,
    inputs: Matrix,
    targets_2d: Sequence[Matrix],
    bases: BaseShapeSet,
) -> tuple[float, Gradients, int]:
    """Mean squared 2D keypoint error after the projection layer, with exact gradients.

    Samples whose predicted skeleton crosses the camera plane are left out of
    the loss and counted.
    """
    outputs, trace = _forward_trace(net, np.asarray(inputs, dtype=np.float64))
    params = normalizer.denormalize(outputs)
    if not np.all(np.isfinite(params)):
        return math.nan, _backward_trace(net, trace, np.zeros_like(outputs)), 0
    loss_grad = np.zeros_like(outputs)
    total, used, skipped = 0.0, 0, 0
    grads_s = []
    for i, (values, x_true) in enumerate(zip(params, targets_2d)):
        s = ParamVector.from_array(values)
        try:
            projected = project_skeleton(s, bases).coords
            jac = projection_jacobian(s, bases)
        except DepthSingularity:
            skipped += 1
            continue
        residuals = (projected - x_true).reshape(-1)
        n = x_true.shape[1]
        total += float(residuals @ residuals) / n
        d_s = 2.0 * (jac.T @ residuals) / n
        if values[INV_F] < 0:
            d_s[INV_F] = 0.0
        grads_s.append((i, d_s))
        used += 1
    if used == 0:
        return 0.0, _backward_trace(net, trace, loss_grad), skipped
    for i, d_s in grads_s:
        loss_grad[i] = d_s * normalizer.std / used
    return total / used, _backward_trace(net, trace, loss_grad), skipped


def mean_reprojection_error(
    net: DenseNet,
    normalizer: Normalizer,
    inputs: Matrix,
    targets_2d: Sequence[Matrix],
    bases: BaseShapeSet,
) -> float:
    """Mean squared 2D keypoint error of the network's predictions; crossings count as inf."""
    params = normalizer.denormalize(forward(net, np.asarray(inputs, dtype=np.float64)))
    if not np.all(np.isfinite(params)):
        return math.inf
    errors = []
    for values, x_true in zip(params, targets_2d):
        try:
            projected = project_skeleton(ParamVector.from_array(values), bases).coords
        except DepthSingularity:
            return math.inf
        errors.append(float(np.sum((projected - x_true) ** 2)) / x_true.shape[1])
    return float(np.mean(errors)) if errors else 0.0


def finetune_through_projection(
    model: Interpreter,
    data2d: Sequence[SynthSample],
    bases: BaseShapeSet,
    cfg: TrainConfig | None = None,
    refiner: DenseNet | None = None,
) -> Interpreter:
    """Train the interpreter on 2D keypoints only, back-propagating through the projection layer."""
    cfg = cfg or TrainConfig()
    if not data2d:
        raise ValueError("2D training set is empty")
    rng = make_rng(cfg.seed, 4)
    inputs = _heatmap_matrix(data2d, refiner)
    targets_2d = [s.x_true.coords for s in data2d]
    train_idx, val_idx = _split(len(data2d), cfg.validation_fraction, rng)
    monitor_idx = val_idx if val_idx.size else train_idx

    def loss_fn(current: DenseNet, batch_idx: NDArray[np.int64]) -> tuple[float, Gradients, int]:
        return projection_loss(
            current,
            model.normalizer,
            inputs[batch_idx].astype(np.float64),
            [targets_2d[i] for i in batch_idx],
            bases,
        )

    def validation_fn(current: DenseNet) -> float:
        return mean_reprojection_error(
            current,
            model.normalizer,
            inputs[monitor_idx].astype(np.float64),
            [targets_2d[i] for i in monitor_idx],
            bases,
        )

    net, history = _run_sgd(model.net, train_idx, loss_fn, validation_fn, cfg, rng, "finetune")
    return Interpreter(net=net, normalizer=model.normalizer, history=history)


def train_scratch(
    data2d: Sequence[SynthSample],
    bases: BaseShapeSet,
    sampler: SamplerConfig,
    cfg: TrainConfig | None = None,
    refiner: DenseNet | None = None,
) -> Interpreter:
    """The interpreter trained end-to-end from 2D keypoints alone, without 3D pre-training."""
    cfg = cfg or TrainConfig()
    if not data2d:
        raise ValueError("2D training set is empty")
    n_inputs = data2d[0].heatmaps.maps.size
    net = DenseNet.initialize(
        n_inputs, (*cfg.interpreter_widths, param_size(bases.k)), make_rng(cfg.seed, 5)
    )
    empty = TrainHistory([], [])
    initial = Interpreter(net=net, normalizer=Normalizer.from_sampler(sampler, bases.k), history=empty)
    return finetune_through_projection(initial, data2d, bases, cfg, refiner)


def predict(net: DenseNet, normalizer: Normalizer, h: HeatmapStack) -> ParamVector:
    """Single forward pass from heatmaps to a parameter vector (``inv_f`` clamped at 0)."""
    if h.maps.size != net.input_dim:
        raise DimensionError(f"interpreter expects {net.input_dim} heatmap cells, got {h.maps.size}")
    values = normalizer.denormalize(forward(net, h.flatten()))
    values[INV_F] = max(0.0, values[INV_F])
    return ParamVector.from_array(values)


class WeightsFile(NamedTuple):
    net: DenseNet
    normalizer: Normalizer | None
    layout: str
    spec_hash: str


def heatmap_layout(n: int, height: int, width: int) -> str:
    return f"heatmaps[{n}x{height}x{width}]"


def save_weights(
    path: Path | str,
    net: DenseNet,
    normalizer: Normalizer | None,
    layout: str,
    spec_hash: str,
) -> None:
    """Write a network in the little-endian weights format."""
    if len(spec_hash) != 40:
        raise ValueError(f"spec hash must be 40 hex digits, got {spec_hash!r}")
    with Path(path).open("wb") as stream:
        stream.write(WEIGHTS_MAGIC)
        stream.write(spec_hash.encode("ascii"))
        stream.write(struct.pack("<I", len(net.layers)))
        for layer in net.layers:
            out_dim, in_dim = layer.weights.shape
            stream.write(struct.pack("<III", out_dim, in_dim, ACTIVATION_CODES[layer.activation]))
            stream.write(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
            stream.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
        if normalizer is None:
            stream.write(struct.pack("<I", 0))
        else:
            stream.write(struct.pack("<I", normalizer.mean.size))
            stream.write(normalizer.mean.astype("<f8").tobytes())
            stream.write(normalizer.std.astype("<f8").tobytes())
        encoded = layout.encode()
        stream.write(struct.pack("<I", len(encoded)))
        stream.write(encoded)


def _read(stream: BinaryIO, size: int) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise DatasetFormatError("truncated weights file")
    return data


def load_weights(path: Path | str, expected_layout: str | None = None) -> WeightsFile:
    with Path(path).open("rb") as stream:
        if _read(stream, len(WEIGHTS_MAGIC)) != WEIGHTS_MAGIC:
            raise DatasetFormatError(f"{path}: not a weights file")
        spec_hash = _read(stream, 40).decode("ascii")
        (n_layers,) = struct.unpack("<I", _read(stream, 4))
        layers = []
        for _ in range(n_layers):
            out_dim, in_dim, code = struct.unpack("<III", _read(stream, 12))
            if code not in ACTIVATIONS_BY_CODE:
                raise DatasetFormatError(f"{path}: unknown activation code {code}")
            weights = np.frombuffer(_read(stream, 8 * out_dim * in_dim), dtype="<f8")
            bias = np.frombuffer(_read(stream, 8 * out_dim), dtype="<f8")
            layers.append(
                DenseLayer(
                    weights.reshape(out_dim, in_dim).astype(np.float64),
                    bias.astype(np.float64),
                    ACTIVATIONS_BY_CODE[code],
                )
            )
        (dim,) = struct.unpack("<I", _read(stream, 4))
        normalizer = None
        if dim:
            mean = np.frombuffer(_read(stream, 8 * dim), dtype="<f8").astype(np.float64)
            std = np.frombuffer(_read(stream, 8 * dim), dtype="<f8").astype(np.float64)
            normalizer = Normalizer(mean=mean, std=std)
        (layout_len,) = struct.unpack("<I", _read(stream, 4))
        layout = _read(stream, layout_len).decode()
    if expected_layout is not None and layout != expected_layout:
        raise DatasetFormatError(
            f"{path}: weights were trained for layout {layout!r}, expected {expected_layout!r}"
        )
    return WeightsFile(net=DenseNet(tuple(layers)), normalizer=normalizer, layout=layout, spec_hash=spec_hash)


def interpreter_layout(bases: BaseShapeSet) -> str:
    return param_layout(bases.k)
