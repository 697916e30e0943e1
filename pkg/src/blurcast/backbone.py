"""
Lightweight forecasting backbones with exact hand-written gradients.

A backbone maps an ``in_steps x in_channels`` input to a ``out_steps x out_channels``
output. Every operation also accepts a leading batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import StrEnum, unique

import numpy as np

from .exception import DimensionMismatch, InvalidConfig, StaleCache
from .numerics import RngStream

__all__ = [
    "BackboneKind",
    "ForwardCache",
    "KindName",
    "ModelParams",
    "backward",
    "forward",
    "init_params",
    "passthrough_params",
    "zero_params",
]

HIDDEN_SEARCH_SPACE = (16, 32)
LAYER_SEARCH_SPACE = (1, 2)


@unique
class KindName(StrEnum):
    LINEAR = "linear"
    MLP = "mlp"


@dataclass(frozen=True, kw_only=True, slots=True)
class BackboneKind:
    name: KindName = KindName.LINEAR
    hidden: int = 16
    layers: int = 1

    def __post_init__(self) -> None:
        if self.name == KindName.MLP and (self.hidden < 1 or self.layers < 1):
            raise InvalidConfig(f"MLP needs positive width and depth, got hidden={self.hidden}, layers={self.layers}")

    @classmethod
    def linear(cls) -> BackboneKind:
        return cls(name=KindName.LINEAR)

    @classmethod
    def mlp(cls, hidden: int = 16, layers: int = 1) -> BackboneKind:
        return cls(name=KindName.MLP, hidden=hidden, layers=layers)

    def layer_sizes(self, fan_in: int, fan_out: int) -> list[tuple[int, int]]:
        if self.name == KindName.LINEAR:
            return [(fan_in, fan_out)]
        sizes = [(fan_in, self.hidden)]
        sizes += [(self.hidden, self.hidden)] * (self.layers - 1)
        sizes.append((self.hidden, fan_out))
        return sizes

    def __str__(self) -> str:
        if self.name == KindName.LINEAR:
            return "linear"
        return f"mlp({self.hidden},{self.layers})"


@dataclass(frozen=True, kw_only=True, slots=True)
class ModelParams:
    """Flat parameter vector with the shape of every weight and bias slice."""

    values: np.ndarray
    shapes: tuple[tuple[str, tuple[int, ...]], ...]
    kind: BackboneKind
    in_shape: tuple[int, int]
    out_shape: tuple[int, int]

    def __post_init__(self) -> None:
        total = sum(math.prod(dims) for _, dims in self.shapes)
        if total != self.values.shape[0]:
            raise DimensionMismatch(f"slices cover {total} values, vector has {self.values.shape[0]}")

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        """Reshaped views into ``values`` keyed by slice name."""
        views: dict[str, np.ndarray] = {}
        offset = 0
        for name, dims in self.shapes:
            count = math.prod(dims)
            views[name] = self.values[offset : offset + count].reshape(dims)
            offset += count
        return views

    def with_values(self, values: np.ndarray) -> ModelParams:
        return ModelParams(
            values=np.asarray(values, dtype=np.float64),
            shapes=self.shapes,
            kind=self.kind,
            in_shape=self.in_shape,
            out_shape=self.out_shape,
        )


@dataclass(slots=True)
class ForwardCache:
    """Activations recorded by :func:`forward`; ``activations[0]`` is the flattened input."""

    activations: list[np.ndarray] = field(default_factory=list)
    in_shape: tuple[int, int] = (0, 0)
    out_shape: tuple[int, int] = (0, 0)
    batched: bool = False


def _shapes_for(kind: BackboneKind, fan_in: int, fan_out: int) -> tuple[tuple[str, tuple[int, ...]], ...]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for index, (rows, cols) in enumerate(kind.layer_sizes(fan_in, fan_out)):
        shapes += [(f"W{index}", (rows, cols)), (f"b{index}", (cols,))]
    return tuple(shapes)


def init_params(
    kind: BackboneKind,
    in_steps: int,
    in_channels: int,
    out_steps: int,
    out_channels: int,
    rng: RngStream,
) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    if min(in_steps, in_channels, out_steps, out_channels) <= 0:
        raise DimensionMismatch("all backbone dimensions must be positive")
    fan_in, fan_out = in_steps * in_channels, out_steps * out_channels
    chunks = []
    for rows, cols in kind.layer_sizes(fan_in, fan_out):
        bound = math.sqrt(6.0 / (rows + cols))
        chunks += [rng.uniform(-bound, bound, rows * cols), np.zeros(cols)]
    return ModelParams(
        values=np.concatenate(chunks),
        shapes=_shapes_for(kind, fan_in, fan_out),
        kind=kind,
        in_shape=(in_steps, in_channels),
        out_shape=(out_steps, out_channels),
    )


def zero_params(kind: BackboneKind, in_steps: int, in_channels: int, out_steps: int, out_channels: int) -> ModelParams:
    """
    Instance whose output is identically zero.

    For an MLP only the head is zeroed; hidden layers keep a deterministic
    non-zero pattern so gradients can reach them after the first update.
    """
    fan_in, fan_out = in_steps * in_channels, out_steps * out_channels
    shapes = _shapes_for(kind, fan_in, fan_out)
    values = np.zeros(sum(math.prod(dims) for _, dims in shapes))
    params = ModelParams(
        values=values, shapes=shapes, kind=kind, in_shape=(in_steps, in_channels), out_shape=(out_steps, out_channels)
    )
    tensors = params.tensors()
    for index in range(len(shapes) // 2 - 1):
        weight = tensors[f"W{index}"]
        rows, cols = weight.shape
        bound = math.sqrt(6.0 / (rows + cols))
        weight[...] = bound * np.sin(np.arange(rows * cols, dtype=np.float64) + 1.0).reshape(rows, cols)
    return params


def passthrough_params(kappa: int, tau: int, n_features: int, n_targets: int) -> ModelParams:
    """
    LinearDirect denoiser that copies the blurred slice of its input.

    The input is ``(kappa + tau) x (n_features + n_targets)``; output cell ``(i, c)``
    reads input cell ``(kappa + i, n_features + c)``.
    """
    channels = n_features + n_targets
    params = zero_params(BackboneKind.linear(), kappa + tau, channels, tau, n_targets)
    weight = params.tensors()["W0"]
    for i in range(tau):
        for c in range(n_targets):
            weight[(kappa + i) * channels + n_features + c, i * n_targets + c] = 1.0
    return params


def _as_batch(params: ModelParams, inputs: np.ndarray) -> tuple[np.ndarray, bool]:
    inputs = np.asarray(inputs, dtype=np.float64)
    batched = inputs.ndim == 3
    if inputs.shape[-2:] != params.in_shape or inputs.ndim not in (2, 3):
        raise DimensionMismatch(f"input has shape {inputs.shape}, model expects {params.in_shape}")
    return inputs.reshape(-1, params.in_shape[0] * params.in_shape[1]), batched


def forward(params: ModelParams, inputs: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    flat, batched = _as_batch(params, inputs)
    tensors = params.tensors()
    n_layers = len(params.shapes) // 2
    activations = [flat]
    hidden = flat
    for index in range(n_layers):
        hidden = hidden @ tensors[f"W{index}"] + tensors[f"b{index}"]
        if index < n_layers - 1:
            hidden = np.tanh(hidden)
        activations.append(hidden)

    output = hidden.reshape(-1, *params.out_shape)
    cache = ForwardCache(activations=activations, in_shape=params.in_shape, out_shape=params.out_shape, batched=batched)
    return (output if batched else output[0]), cache


def backward(params: ModelParams, cache: ForwardCache, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``<upstream, output>`` with respect to the parameters and the input."""
    if cache.in_shape != params.in_shape or cache.out_shape != params.out_shape or not cache.activations:
        raise StaleCache(f"cache was recorded for {cache.in_shape}->{cache.out_shape}")
    batch = cache.activations[0].shape[0]
    expected = (batch, *params.out_shape) if cache.batched else params.out_shape
    if upstream.shape != expected:
        raise StaleCache(f"upstream has shape {upstream.shape}, forward produced {expected}")

    tensors = params.tensors()
    n_layers = len(params.shapes) // 2
    delta = upstream.reshape(batch, -1)
    grads: dict[str, np.ndarray] = {}
    for index in reversed(range(n_layers)):
        layer_input = cache.activations[index]
        grads[f"W{index}"] = layer_input.T @ delta
        grads[f"b{index}"] = delta.sum(axis=0)
        delta = delta @ tensors[f"W{index}"].T
        if index > 0:
            delta = delta * (1.0 - layer_input**2)

    param_grad = np.concatenate([grads[name].reshape(-1) for name, _ in params.shapes])
    input_grad = delta.reshape(batch, *params.in_shape)
    return param_grad, (input_grad if cache.batched else input_grad[0])
