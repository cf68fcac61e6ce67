"""Chain networks: forward traces and per-layer vector-Jacobian products.

A chain is f_0, ..., f_{L-1} (affine map followed by an elementwise
nonlinearity) closed by a parameter-free loss f_L.  Every array carries a
leading batch axis; 1-D vectors are accepted and promoted to a batch of one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

ACTIVATIONS = ("identity", "tanh", "relu")
LOSSES = ("squared-euclidean", "softmax-cross-entropy")


class ShapeError(ValueError):
    """An array does not have the shape the chain expects."""


class NumericOverflowError(ArithmeticError):
    def __init__(self, layer: int, message: str = ""):
        self.layer = layer
        super().__init__(message or f"non-finite value produced by layer {layer}")


class TargetEncodingError(ValueError):
    """Cross-entropy target rows must be one-hot."""


@dataclass(frozen=True)
class ChainSpec:
    layer_dims: tuple
    activations: tuple
    loss: str = "squared-euclidean"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        acts = self.activations
        if isinstance(acts, str):
            acts = (acts,) * (len(dims) - 1)
        acts = tuple(acts)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "activations", acts)
        if len(dims) < 2:
            raise ValueError("a chain needs at least an input and an output width")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer widths must be >= 1, got {dims}")
        if len(acts) != len(dims) - 1:
            raise ValueError(
                f"expected {len(dims) - 1} activations, got {len(acts)}")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}; choose from {ACTIVATIONS}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {LOSSES}")

    @property
    def depth(self) -> int:
        """Number of parameterised layers L."""
        return len(self.layer_dims) - 1

    @classmethod
    def uniform(cls, depth: int, d_in: int, width: int, d_out: int,
                activation: str = "tanh", output_activation: Optional[str] = None,
                loss: str = "squared-euclidean") -> "ChainSpec":
        dims = [d_in] + [width] * (depth - 1) + [d_out]
        acts = [activation] * depth
        if output_activation is not None:
            acts[-1] = output_activation
        return cls(tuple(dims), tuple(acts), loss)


@dataclass(frozen=True)
class GradBlock:
    """Gradient (or value) for one layer's weight matrix and optional bias."""
    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def flat(self) -> np.ndarray:
        if self.bias is None:
            return self.weight.ravel()
        return np.concatenate([self.weight.ravel(), self.bias.ravel()])


@dataclass(frozen=True)
class Parameters:
    spec: ChainSpec
    weights: tuple
    biases: Optional[tuple] = None

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        object.__setattr__(self, "weights", ws)
        dims = self.spec.layer_dims
        if len(ws) != self.spec.depth:
            raise ShapeError(f"expected {self.spec.depth} weight matrices, got {len(ws)}")
        for i, w in enumerate(ws):
            if w.shape != (dims[i + 1], dims[i]):
                raise ShapeError(
                    f"weight {i} has shape {w.shape}, expected {(dims[i + 1], dims[i])}")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"weight {i} has non-finite entries")
        if self.biases is not None:
            bs = tuple(np.array(b, dtype=np.float64).reshape(-1) for b in self.biases)
            if len(bs) != len(ws):
                raise ShapeError(f"expected {len(ws)} bias vectors, got {len(bs)}")
            for i, b in enumerate(bs):
                if b.shape != (dims[i + 1],):
                    raise ShapeError(f"bias {i} has shape {b.shape}, expected {(dims[i + 1],)}")
                if not np.all(np.isfinite(b)):
                    raise ValueError(f"bias {i} has non-finite entries")
            object.__setattr__(self, "biases", bs)
        for a in ws + (self.biases or ()):
            a.flags.writeable = False

    @property
    def has_bias(self) -> bool:
        return self.biases is not None

    @classmethod
    def init(cls, spec: ChainSpec, rng: np.random.Generator, bias: bool = True,
             bias_scale: float = 0.0) -> "Parameters":
        """Glorot-uniform weights, biases uniform in +-bias_scale (zero by default)."""
        ws, bs = [], []
        for d_in, d_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
            limit = np.sqrt(6.0 / (d_in + d_out))
            ws.append(rng.uniform(-limit, limit, size=(d_out, d_in)))
            if bias:
                bs.append(rng.uniform(-bias_scale, bias_scale, size=d_out)
                          if bias_scale > 0 else np.zeros(d_out))
        return cls(spec, tuple(ws), tuple(bs) if bias else None)

    def blocks(self) -> tuple:
        bs = self.biases if self.biases is not None else (None,) * len(self.weights)
        return tuple(GradBlock(w, b) for w, b in zip(self.weights, bs))


@dataclass(frozen=True)
class ForwardTrace:
    """Feed-forward values of one batch.

    ``mu[0]`` is the input x_0 and ``mu[l]`` the output of f_{l-1}, so the
    indices line up with layer numbers; ``mu[L]`` is the pre-loss prediction.
    """
    mu: tuple
    target: np.ndarray
    loss_value: float

    @property
    def depth(self) -> int:
        return len(self.mu) - 1


def as_batch(v, width: int, name: str = "array") -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != width:
        raise ShapeError(f"{name} must have trailing width {width}, got shape {np.shape(v)}")
    return a


def _match_ndim(out: np.ndarray, like) -> np.ndarray:
    return out[0] if np.ndim(like) == 1 else out


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_slope(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    if kind == "relu":
        # subgradient at 0 is 0
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


def _preactivation(params: Parameters, layer: int, x: np.ndarray) -> np.ndarray:
    z = x @ params.weights[layer].T
    if params.biases is not None:
        z = z + params.biases[layer]
    return z


def layer_forward(params: Parameters, layer: int, point) -> np.ndarray:
    """f_layer(point); the point may be any state, not only the feed-forward one."""
    spec = params.spec
    x = as_batch(point, spec.layer_dims[layer], "point")
    with np.errstate(over="ignore", invalid="ignore"):
        out = _activate(spec.activations[layer], _preactivation(params, layer, x))
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(layer)
    return _match_ndim(out, point)


def forward(params: Parameters, inputs, targets) -> ForwardTrace:
    spec = params.spec
    x0 = as_batch(inputs, spec.layer_dims[0], "input")
    t = as_batch(targets, spec.layer_dims[-1], "target")
    if x0.shape[0] != t.shape[0]:
        raise ShapeError(f"{x0.shape[0]} inputs but {t.shape[0]} targets")
    mu = [x0]
    for layer in range(spec.depth):
        mu.append(layer_forward(params, layer, mu[-1]))
    return ForwardTrace(tuple(mu), t, loss_value(spec.loss, mu[-1], t))


def _check_one_hot(t: np.ndarray) -> None:
    if not (np.all((t == 0.0) | (t == 1.0)) and np.all(t.sum(axis=1) == 1.0)):
        raise TargetEncodingError("cross-entropy targets must be one-hot rows")


def _log_softmax(p: np.ndarray) -> np.ndarray:
    shifted = p - p.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_value(loss_kind: str, prediction, target) -> float:
    """Batch-mean loss.  Squared-euclidean is 0.5*|p - t|^2 per row."""
    p = np.atleast_2d(np.asarray(prediction, dtype=np.float64))
    t = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ")
    if loss_kind == "squared-euclidean":
        per_row = 0.5 * np.sum((p - t) ** 2, axis=1)
    elif loss_kind == "softmax-cross-entropy":
        _check_one_hot(t)
        per_row = -np.sum(t * _log_softmax(p), axis=1)
    else:
        raise ValueError(f"unknown loss {loss_kind!r}")
    return float(per_row.mean())


def loss_error(loss_kind: str, prediction, target) -> np.ndarray:
    """Per-row gradient of the loss with respect to the prediction."""
    p = np.asarray(prediction, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ")
    if loss_kind == "squared-euclidean":
        return p - t
    if loss_kind == "softmax-cross-entropy":
        p2, t2 = np.atleast_2d(p), np.atleast_2d(t)
        _check_one_hot(t2)
        return _match_ndim(np.exp(_log_softmax(p2)) - t2, p)
    raise ValueError(f"unknown loss {loss_kind!r}")


def _vjp_inputs(params, layer, point, cotangent):
    spec = params.spec
    if not 0 <= layer < spec.depth:
        raise IndexError(f"layer {layer} out of range for depth {spec.depth}")
    x = as_batch(point, spec.layer_dims[layer], "point")
    v = as_batch(cotangent, spec.layer_dims[layer + 1], "cotangent")
    if x.shape[0] != v.shape[0]:
        raise ShapeError(f"point batch {x.shape[0]} != cotangent batch {v.shape[0]}")
    slope = _activation_slope(spec.activations[layer], _preactivation(params, layer, x))
    return x, slope * v


def layer_vjp(params: Parameters, layer: int, point, cotangent) -> np.ndarray:
    """(df_layer/dx at point)^T @ cotangent, i.e. g'(W x + b) * v pulled back through W."""
    _, delta = _vjp_inputs(params, layer, point, cotangent)
    return _match_ndim(delta @ params.weights[layer], cotangent)


def param_vjp(params: Parameters, layer: int, point, cotangent) -> GradBlock:
    """(df_layer/dtheta at point)^T @ cotangent, averaged over the batch."""
    x, delta = _vjp_inputs(params, layer, point, cotangent)
    n = x.shape[0]
    weight = delta.T @ x / n
    bias = delta.sum(axis=0) / n if params.biases is not None else None
    return GradBlock(weight, bias)
