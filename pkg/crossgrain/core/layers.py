"""Fully-connected layers with hand-written backpropagation.

Shared by the stage-1 correlation network and the stage-2 multi-task
network.  A forward pass returns an :class:`MlpTrace` holding every
intermediate needed by :meth:`Mlp.backward`; nothing is cached on the layers
themselves, so a trained network can be used from several threads.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from crossgrain.core.numeric import FeatureMatrix, SeededRng, Vector, matmul, relu, sigmoid
from crossgrain.errors import ShapeError


class Activation(str, Enum):
    SIGMOID = "sigmoid"
    RELU = "relu"
    TANH = "tanh"
    LINEAR = "linear"


def activate(kind: Activation, z: FeatureMatrix) -> FeatureMatrix:
    if kind is Activation.SIGMOID:
        return sigmoid(z)
    if kind is Activation.RELU:
        return relu(z)
    if kind is Activation.TANH:
        return np.tanh(z)
    return z


def _activation_grad(kind: Activation, z: FeatureMatrix, y: FeatureMatrix) -> FeatureMatrix:
    if kind is Activation.SIGMOID:
        return y * (1.0 - y)
    if kind is Activation.RELU:
        return (z > 0).astype(np.float64)
    if kind is Activation.TANH:
        return 1.0 - y * y
    return np.ones_like(z)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

@dataclass
class DenseLayer:
    """y = act(x W + b) with ``W`` of shape (in_dim, out_dim)."""

    weights: FeatureMatrix
    bias: Vector
    activation: Activation = Activation.SIGMOID

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def forward(self, x: FeatureMatrix) -> tuple[FeatureMatrix, FeatureMatrix]:
        if x.shape[1] != self.in_dim:
            raise ShapeError(
                f"layer expects width {self.in_dim}, got input of shape {x.shape}",
                x.shape, self.weights.shape,
            )
        z = matmul(x, self.weights) + self.bias
        return z, activate(self.activation, z)


def init_dense(in_dim: int, out_dim: int, activation: Activation, rng: SeededRng) -> DenseLayer:
    """Identity weights and zero bias for square layers; otherwise uniform
    noise in ``±1/sqrt(in_dim)``."""
    if in_dim == out_dim:
        weights = np.eye(in_dim, dtype=np.float64)
    else:
        scale = 1.0 / np.sqrt(in_dim)
        weights = rng.uniform(-scale, scale, size=(in_dim, out_dim))
    return DenseLayer(weights=weights, bias=np.zeros(out_dim), activation=activation)


@dataclass
class MlpTrace:
    inputs: list[FeatureMatrix] = field(default_factory=list)
    pre: list[FeatureMatrix] = field(default_factory=list)
    post: list[FeatureMatrix] = field(default_factory=list)
    masks: list[FeatureMatrix | None] = field(default_factory=list)
    output: FeatureMatrix | None = None


@dataclass
class Mlp:
    """A stack of :class:`DenseLayer` objects."""

    layers: list[DenseLayer]

    @classmethod
    def build(
        cls,
        dims: list[int] | tuple[int, ...],
        activations: list[Activation],
        rng: SeededRng,
    ) -> Mlp:
        """``dims`` lists every width including the input, so it has one more
        entry than ``activations``."""
        if len(dims) != len(activations) + 1:
            raise ShapeError(f"{len(dims)} widths cannot describe {len(activations)} layers")
        return cls([
            init_dense(dims[i], dims[i + 1], activations[i], rng)
            for i in range(len(activations))
        ])

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(
        self,
        x: FeatureMatrix,
        *,
        dropout: float = 0.0,
        dropout_after: tuple[int, ...] = (),
        rng: SeededRng | None = None,
    ) -> MlpTrace:
        """Run the stack, applying inverted dropout after the listed layer
        indices when ``dropout > 0`` and an rng is supplied."""
        trace = MlpTrace()
        h = x
        for i, layer in enumerate(self.layers):
            trace.inputs.append(h)
            z, y = layer.forward(h)
            trace.pre.append(z)
            trace.post.append(y)
            mask = None
            if dropout > 0.0 and rng is not None and i in dropout_after:
                keep = 1.0 - dropout
                mask = rng.bernoulli(np.full(y.shape, keep)) / keep
                y = y * mask
            trace.masks.append(mask)
            h = y
        trace.output = h
        return trace

    def __call__(self, x: FeatureMatrix) -> FeatureMatrix:
        out = self.forward(x).output
        assert out is not None
        return out

    def backward(
        self, trace: MlpTrace, grad_out: FeatureMatrix
    ) -> tuple[list[tuple[FeatureMatrix, Vector]], FeatureMatrix]:
        """Return per-layer ``(dW, db)`` and the gradient w.r.t. the input."""
        grads: list[tuple[FeatureMatrix, Vector]] = [None] * len(self.layers)  # type: ignore[list-item]
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            mask = trace.masks[i]
            if mask is not None:
                g = g * mask
            dz = g * _activation_grad(layer.activation, trace.pre[i], trace.post[i])
            grads[i] = (matmul(trace.inputs[i].T, dz), dz.sum(axis=0))
            g = matmul(dz, layer.weights.T)
        return grads, g

    def parameters(self) -> list[np.ndarray]:
        params: list[np.ndarray] = []
        for layer in self.layers:
            params.extend((layer.weights, layer.bias))
        return params

    def copy(self) -> Mlp:
        return copy.deepcopy(self)


def flat_grads(grads: list[tuple[FeatureMatrix, Vector]]) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for dw, db in grads:
        out.extend((dw, db))
    return out


# ---------------------------------------------------------------------------
# Parameter vectors (gradient checks)
# ---------------------------------------------------------------------------

def pack(arrays: list[np.ndarray]) -> Vector:
    return np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)


def unpack_into(arrays: list[np.ndarray], vector: Vector) -> None:
    """Overwrite *arrays* in place from a vector produced by :func:`pack`."""
    offset = 0
    for a in arrays:
        n = a.size
        a[...] = vector[offset:offset + n].reshape(a.shape)
        offset += n


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

class Sgd:
    """Mini-batch gradient descent with classical momentum, updating in place."""

    def __init__(self, params: list[np.ndarray], learning_rate: float, momentum: float = 0.0) -> None:
        self.params = params
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        for p, g, v in zip(self.params, grads, self._velocity):
            v *= self.momentum
            v -= self.learning_rate * g
            p += v
