"""
Small differentiable feature extractor.

A multilayer perceptron phi: R^D -> R^d whose parameters live in one flat
float64 vector. Gradients are computed by reverse accumulation over the layer
stack: ``record`` runs the forward pass and keeps every intermediate value on a
``Tape``, and the tape turns an upstream vector u into d(u . phi(x))/d theta
and d(u . phi(x))/dx.

All functions accept a single input of shape (D,) or a batch of shape (N, D).
Batched parameter gradients are summed over the batch.
"""

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike
from numpy.typing import NDArray

from gmmc.errors import ArgumentError
from gmmc.errors import DimensionError

__all__ = [
    "Activation",
    "NetworkSpec",
    "LayerLayout",
    "ParameterVector",
    "Tape",
    "parameter_layout",
    "init_params",
    "record",
    "forward",
    "grad_params",
    "grad_input",
]


class Activation(str, enum.Enum):
    """Elementwise nonlinearity applied after a hidden layer."""

    TANH = "tanh"
    RELU = "relu"
    IDENTITY = "identity"


@dataclass(frozen=True)
class NetworkSpec(object):
    """Architecture of the feature extractor."""

    input_dim: int
    """Input dimension D."""

    widths: tuple[int, ...]
    """Output width of every layer; the last entry is the feature dim d."""

    activations: tuple[Activation, ...]
    """One activation per hidden layer. The output layer is always linear."""

    init_seed: int = 0
    """Seed for the parameter initialiser (unsigned 64-bit)."""

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ArgumentError(f"input_dim must be positive, got {self.input_dim}")
        if not self.widths or any(width < 1 for width in self.widths):
            raise ArgumentError(f"widths must be non-empty and positive: {self.widths}")
        if len(self.activations) != len(self.widths) - 1:
            raise ArgumentError(
                f"Expected {len(self.widths) - 1} hidden activations, "
                f"got {len(self.activations)}"
            )
        if not 0 <= self.init_seed < 2**64:
            raise ArgumentError(f"init_seed must fit in 64 bits: {self.init_seed}")
        # Coerce plain strings such as "tanh" coming from config files.
        object.__setattr__(
            self, "activations", tuple(Activation(a) for a in self.activations)
        )
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @property
    def num_layers(self) -> int:
        return len(self.widths)

    def activation_for(self, layer: int) -> Activation:
        """Activation applied after ``layer``; the last layer is linear."""
        if layer == self.num_layers - 1:
            return Activation.IDENTITY
        return self.activations[layer]


@dataclass(frozen=True)
class LayerLayout(object):
    """Where one layer's weights and biases sit in the flat parameter vector."""

    fan_in: int
    fan_out: int
    weight_offset: int
    bias_offset: int

    @property
    def end(self) -> int:
        return self.bias_offset + self.fan_out


def parameter_layout(spec: NetworkSpec) -> tuple[LayerLayout, ...]:
    """Segment layout: per layer, a row-major (fan_out, fan_in) weight block then the bias."""
    layout = []
    offset = 0
    fan_in = spec.input_dim
    for fan_out in spec.widths:
        bias_offset = offset + fan_in * fan_out
        layout.append(LayerLayout(fan_in, fan_out, offset, bias_offset))
        offset = bias_offset + fan_out
        fan_in = fan_out
    return tuple(layout)


@dataclass(frozen=True, eq=False)
class ParameterVector(object):
    """Flat parameter array plus the layout that maps it onto layers."""

    values: NDArray[np.float64]
    layout: tuple[LayerLayout, ...]

    def __post_init__(self) -> None:
        expected = self.layout[-1].end if self.layout else 0
        if self.values.shape != (expected,):
            raise DimensionError(
                f"Parameter vector has shape {self.values.shape}, layout needs ({expected},)"
            )

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def weight(self, layer: int) -> NDArray[np.float64]:
        """(fan_out, fan_in) view of a layer's weight matrix."""
        seg = self.layout[layer]
        return self.values[seg.weight_offset : seg.bias_offset].reshape(
            seg.fan_out, seg.fan_in
        )

    def bias(self, layer: int) -> NDArray[np.float64]:
        seg = self.layout[layer]
        return self.values[seg.bias_offset : seg.end]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def replace_values(self, values: NDArray[np.float64]) -> "ParameterVector":
        return ParameterVector(values=values, layout=self.layout)


def init_params(spec: NetworkSpec) -> ParameterVector:
    """
    Fan-based uniform initialisation.

    Weights are drawn from U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))
    and biases start at zero. The result depends only on ``spec``.
    """
    layout = parameter_layout(spec)
    rng = np.random.default_rng(spec.init_seed)
    values = np.zeros(layout[-1].end, dtype=np.float64)
    for seg in layout:
        limit = math.sqrt(6.0 / (seg.fan_in + seg.fan_out))
        values[seg.weight_offset : seg.bias_offset] = rng.uniform(
            -limit, limit, size=seg.fan_in * seg.fan_out
        )
    return ParameterVector(values=values, layout=layout)


# -----Forward and reverse passes----------------------------------------------


def _activate(z: NDArray[np.float64], activation: Activation) -> NDArray[np.float64]:
    if activation is Activation.TANH:
        return np.tanh(z)
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def _activation_grad(
    z: NDArray[np.float64], out: NDArray[np.float64], activation: Activation
) -> Optional[NDArray[np.float64]]:
    """Elementwise derivative, or None for identity. relu'(0) is 0."""
    if activation is Activation.TANH:
        return 1.0 - out * out
    if activation is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    return None


@dataclass(frozen=True, eq=False)
class Tape(object):
    """Forward-pass record used to evaluate vector-Jacobian products."""

    params: ParameterVector
    spec: NetworkSpec
    inputs: tuple[NDArray[np.float64], ...]
    """Input to every layer; inputs[0] is the (N, D) network input."""

    pre_activations: tuple[NDArray[np.float64], ...]
    outputs: tuple[NDArray[np.float64], ...]
    batched: bool
    """False when the caller passed a single (D,) vector."""

    @property
    def output(self) -> NDArray[np.float64]:
        """phi(x), shaped (d,) or (N, d) to match the recorded input."""
        result = self.outputs[-1]
        return result if self.batched else result[0]

    def backward(
        self, upstream: ArrayLike, need_params: bool = True
    ) -> tuple[Optional[ParameterVector], NDArray[np.float64]]:
        """
        Reverse accumulation of ``upstream . phi(x)``.

        Returns:
            (parameter gradient summed over the batch or None, input gradient
            shaped like the recorded input).
        """
        delta = _as_batch(upstream, self.spec.feature_dim, "upstream")
        if delta.shape[0] != self.inputs[0].shape[0]:
            raise DimensionError(
                f"Upstream batch {delta.shape[0]} does not match input batch "
                f"{self.inputs[0].shape[0]}"
            )

        grads = np.zeros_like(self.params.values) if need_params else None
        for layer in reversed(range(self.spec.num_layers)):
            local = _activation_grad(
                self.pre_activations[layer],
                self.outputs[layer],
                self.spec.activation_for(layer),
            )
            if local is not None:
                delta = delta * local

            if grads is not None:
                seg = self.params.layout[layer]
                grads[seg.weight_offset : seg.bias_offset] = (
                    delta.T @ self.inputs[layer]
                ).ravel()
                grads[seg.bias_offset : seg.end] = delta.sum(axis=0)

            delta = delta @ self.params.weight(layer)

        param_grad = self.params.replace_values(grads) if grads is not None else None
        return param_grad, delta if self.batched else delta[0]


def _as_batch(x: ArrayLike, width: int, name: str) -> NDArray[np.float64]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise DimensionError(
            f"Expected {name} of shape ({width},) or (N, {width}), "
            f"got {np.shape(x)}"
        )
    return arr


def record(params: ParameterVector, spec: NetworkSpec, x: ArrayLike) -> Tape:
    """Run the forward pass and keep what the reverse pass needs."""
    batched = np.ndim(x) == 2
    h = _as_batch(x, spec.input_dim, "input")
    if len(params.layout) != spec.num_layers:
        raise DimensionError("Parameter layout does not match the network spec")

    inputs = []
    pre_activations = []
    outputs = []
    for layer in range(spec.num_layers):
        inputs.append(h)
        z = h @ params.weight(layer).T + params.bias(layer)
        h = _activate(z, spec.activation_for(layer))
        pre_activations.append(z)
        outputs.append(h)

    return Tape(
        params=params,
        spec=spec,
        inputs=tuple(inputs),
        pre_activations=tuple(pre_activations),
        outputs=tuple(outputs),
        batched=batched,
    )


def forward(
    params: ParameterVector, spec: NetworkSpec, x: ArrayLike
) -> NDArray[np.float64]:
    """Feature vector phi(x) for a (D,) input, or (N, d) features for a batch."""
    return record(params, spec, x).output


def grad_params(
    params: ParameterVector, spec: NetworkSpec, x: ArrayLike, upstream: ArrayLike
) -> ParameterVector:
    """d(upstream . phi(x))/d theta, summed over the batch."""
    param_grad, _ = record(params, spec, x).backward(upstream, need_params=True)
    assert param_grad is not None
    return param_grad


def grad_input(
    params: ParameterVector, spec: NetworkSpec, x: ArrayLike, upstream: ArrayLike
) -> NDArray[np.float64]:
    """d(upstream . phi(x))/dx, shaped like ``x``."""
    _, input_grad = record(params, spec, x).backward(upstream, need_params=False)
    return input_grad
