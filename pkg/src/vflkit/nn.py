"""Minimal dense neural-network engine.

Just enough to host one party's model segment: fully-connected layers with
ReLU/identity activations, softmax cross entropy, plain SGD, and a
finite-difference gradient checker. Everything is float64 numpy so that
oracle-equivalence tests can use tight tolerances.

Matrices are 2-D ``float64`` arrays (batch rows, feature columns). The wire
form used by the transport layer is ``rows (u32 LE), cols (u32 LE)`` followed
by row-major little-endian float64 values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ShapeError, StateError

__all__ = [
    "Activation",
    "SegmentSpec",
    "DenseLayer",
    "ModelSegment",
    "init_segment",
    "softmax_cross_entropy",
    "finite_diff_gradcheck",
    "matrix_to_bytes",
    "matrix_from_bytes",
]


class Activation(Enum):
    RELU = "relu"
    IDENTITY = "identity"

    @classmethod
    def parse(cls, name: str) -> "Activation":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown activation {name!r}") from None


def as_matrix(x, cols: int | None = None) -> np.ndarray:
    """Coerce to a 2-D float64 array, checking finiteness (and width if given)."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if not np.isfinite(m).all():
        raise ValueError("matrix contains NaN or Inf")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} columns, got {m.shape[1]}")
    return m


def matrix_to_bytes(m: np.ndarray) -> bytes:
    m = as_matrix(m)
    rows, cols = m.shape
    return struct.pack("<II", rows, cols) + np.ascontiguousarray(m, dtype="<f8").tobytes()


def matrix_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise ShapeError("matrix blob shorter than its header")
    rows, cols = struct.unpack_from("<II", data)
    expected = 8 + rows * cols * 8
    if len(data) != expected:
        raise ShapeError(f"matrix blob length {len(data)} != expected {expected}")
    flat = np.frombuffer(data, dtype="<f8", offset=8)
    m = flat.reshape(rows, cols).astype(np.float64)
    if not np.isfinite(m).all():
        raise ValueError("matrix contains NaN or Inf")
    return m


@dataclass(frozen=True)
class SegmentSpec:
    """Shape description of one party's layer stack.

    ``layer_dims`` is a list of (in, out) pairs whose dims must chain;
    ``activations`` matches it one-to-one.
    """

    layer_dims: tuple[tuple[int, int], ...]
    activations: tuple[Activation, ...]

    def __post_init__(self):
        if not self.layer_dims:
            raise ValueError("segment needs at least one layer")
        if len(self.layer_dims) != len(self.activations):
            raise ValueError("one activation per layer required")
        for (i_in, i_out) in self.layer_dims:
            if i_in < 1 or i_out < 1:
                raise ValueError(f"layer dims must be positive, got {(i_in, i_out)}")
        for (_, prev_out), (next_in, _) in zip(self.layer_dims, self.layer_dims[1:]):
            if prev_out != next_in:
                raise ValueError(
                    f"layer dims do not chain: out={prev_out} feeds in={next_in}"
                )

    @classmethod
    def from_dims(cls, dims: list[int], activations: list[Activation]) -> "SegmentSpec":
        """Build from a width chain, e.g. [392, 64] + [RELU]."""
        if len(dims) < 2:
            raise ValueError("need at least two widths")
        pairs = tuple(zip(dims[:-1], dims[1:]))
        return cls(pairs, tuple(activations))

    @property
    def input_width(self) -> int:
        return self.layer_dims[0][0]

    @property
    def output_width(self) -> int:
        return self.layer_dims[-1][1]


@dataclass
class DenseLayer:
    """One fully-connected layer with cached forward state and gradient buffers."""

    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: Activation
    cached_input: np.ndarray | None = None
    cached_preact: np.ndarray | None = None
    grad_weights: np.ndarray = field(init=False)
    grad_bias: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("weight/bias shapes inconsistent")
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def in_width(self) -> int:
        return self.weights.shape[1]

    @property
    def out_width(self) -> int:
        return self.weights.shape[0]

    def _apply(self, x: np.ndarray, cache: bool) -> np.ndarray:
        z = x @ self.weights.T + self.bias
        if cache:
            self.cached_input = x
            self.cached_preact = z
        if self.activation is Activation.RELU:
            return np.maximum(z, 0.0)
        return z

    def _backprop(self, grad_out: np.ndarray) -> np.ndarray:
        if self.cached_input is None or self.cached_preact is None:
            raise StateError("backward called without a cached forward pass")
        if grad_out.shape != self.cached_preact.shape:
            raise ShapeError(
                f"gradient shape {grad_out.shape} != forward output {self.cached_preact.shape}"
            )
        if self.activation is Activation.RELU:
            dz = grad_out * (self.cached_preact > 0.0)
        else:
            dz = grad_out
        self.grad_weights += dz.T @ self.cached_input
        self.grad_bias += dz.sum(axis=0)
        return dz @ self.weights


@dataclass
class ModelSegment:
    """An ordered layer stack owned by one party."""

    layers: list[DenseLayer]
    rng_seed: int

    @property
    def input_width(self) -> int:
        return self.layers[0].in_width

    @property
    def output_width(self) -> int:
        return self.layers[-1].out_width

    def forward(self, x) -> np.ndarray:
        """Run the stack, caching per-layer inputs for a later backward pass."""
        out = as_matrix(x, cols=self.input_width)
        for layer in self.layers:
            out = layer._apply(out, cache=True)
        if not np.isfinite(out).all():
            raise ValueError("forward pass produced NaN or Inf")
        return out

    def predict(self, x) -> np.ndarray:
        """Forward pass without touching cached state (evaluation only)."""
        out = as_matrix(x, cols=self.input_width)
        for layer in self.layers:
            out = layer._apply(out, cache=False)
        return out

    def backward(self, grad_output) -> np.ndarray:
        """Accumulate parameter gradients; return the gradient w.r.t. the input.

        Any batch-mean convention is expected to be folded into ``grad_output``
        (softmax_cross_entropy already divides by the batch size).
        """
        grad = as_matrix(grad_output, cols=self.output_width)
        for layer in reversed(self.layers):
            grad = layer._backprop(grad)
        if not np.isfinite(grad).all():
            raise ValueError("backward pass produced NaN or Inf")
        return grad

    def sgd_step(self, lr: float) -> None:
        """theta <- theta - lr * grad; zero gradients; drop forward caches."""
        for layer in self.layers:
            layer.weights -= lr * layer.grad_weights
            layer.bias -= lr * layer.grad_bias
            layer.grad_weights[:] = 0.0
            layer.grad_bias[:] = 0.0
            layer.cached_input = None
            layer.cached_preact = None

    def parameters(self):
        """Yield (weights, bias) per layer; mutating them mutates the segment."""
        for layer in self.layers:
            yield layer.weights, layer.bias

    def copy_parameters(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(layer.weights.copy(), layer.bias.copy()) for layer in self.layers]


def init_segment(spec: SegmentSpec, seed: int) -> ModelSegment:
    """Deterministically initialize a segment from (spec, seed).

    Weights are uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for (fan_in, fan_out), act in zip(spec.layer_dims, spec.activations):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(DenseLayer(weights=w, bias=np.zeros(fan_out), activation=act))
    return ModelSegment(layers=layers, rng_seed=seed)


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Row-stabilized softmax cross entropy, mean over the batch.

    Returns (loss, grad) with grad = (softmax - onehot) / batch_size.
    """
    z = as_matrix(logits)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = z.shape
    if y.shape[0] != batch:
        raise ShapeError(f"{y.shape[0]} labels for {batch} logit rows")
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = float(-log_probs[np.arange(batch), y].mean())
    grad = np.exp(log_probs)
    grad[np.arange(batch), y] -= 1.0
    grad /= batch
    return loss, grad


def finite_diff_gradcheck(segment: ModelSegment, x, labels, epsilon: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The loss is softmax cross entropy over the segment's output. Every weight
    and bias entry is perturbed by +/- epsilon. The segment's parameters and
    gradient buffers are restored to a clean state afterwards.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = as_matrix(x, cols=segment.input_width)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)

    _, grad_logits = softmax_cross_entropy(segment.forward(x), y)
    segment.backward(grad_logits)
    analytic = [(l.grad_weights.copy(), l.grad_bias.copy()) for l in segment.layers]
    segment.sgd_step(0.0)  # zero grads, drop caches, leave parameters intact

    def loss_at() -> float:
        loss, _ = softmax_cross_entropy(segment.predict(x), y)
        return loss

    worst = 0.0
    for layer, (gw, gb) in zip(segment.layers, analytic):
        for param, grad in ((layer.weights, gw), (layer.bias, gb)):
            flat = param.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                up = loss_at()
                flat[i] = orig - epsilon
                down = loss_at()
                flat[i] = orig
                numeric = (up - down) / (2.0 * epsilon)
                denom = max(abs(gflat[i]), abs(numeric), 1e-8)
                worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
