"""Gradient engines: backprop, variational PC, FPA-PC, Z-IL and Case-2 scaling.

Every engine returns a :class:`GradientSet` holding dE/dtheta in the same
orientation, so results can be compared block for block and fed straight
into :func:`sgd_step`.

Sign conventions.  Backprop and FPA-PC errors are loss gradients
(``e_l = dE/dmu_l``; FPA stores them as ``x_l - mu_l``).  Variational PC and
Z-IL follow the generative-model errors ``e_l = x_l - f_{l-1}(x_{l-1})`` and
``e_L = -(1/k) dE/dp``, which makes inference a descent on the negative log
joint.  Their learning signal is the gradient of that objective, so the
returned blocks are ``-param_vjp(l, x_l, prec_{l+1} * e_{l+1})``.
"""
from __future__ import annotations

import contextlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .chain import (
    ForwardTrace, GradBlock, Parameters, ShapeError, as_batch, forward,
    layer_forward, layer_vjp, loss_error, loss_value, param_vjp,
)

VARIANTS = ("backprop", "vpc", "fpa", "zil")
_ALIASES = {
    "bp": "backprop", "backpropagation": "backprop",
    "variational": "vpc", "vpc": "vpc",
    "fpa-pc": "fpa", "fpa_pc": "fpa", "fpa": "fpa",
    "z-il": "zil", "z_il": "zil", "zil": "zil",
}
DIVERGENCE_LIMIT = 1e12

# test-only fault switch, see inject_fault()
_FAULTS: set = set()


def canonical_variant(name: str) -> str:
    key = name.strip().lower()
    key = _ALIASES.get(key, key)
    if key not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {VARIANTS}")
    return key


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, layer: int, value: float):
        self.step, self.layer, self.value = step, layer, value
        super().__init__(
            f"inference diverged at step {step}, layer {layer} (max |x| = {value:.3g})")


class RequirementError(ValueError):
    """A Z-IL configuration that violates one of its requirements."""


@dataclass(frozen=True)
class GradientSet:
    blocks: tuple

    def __len__(self):
        return len(self.blocks)

    def __getitem__(self, layer):
        return self.blocks[layer]

    def __iter__(self):
        return iter(self.blocks)

    def layer_flat(self, layer: int) -> np.ndarray:
        return self.blocks[layer].flat()

    def flat(self) -> np.ndarray:
        return np.concatenate([b.flat() for b in self.blocks])

    def max_abs_diff(self, other: "GradientSet") -> float:
        _check_same_shapes(self, other)
        return float(np.max(np.abs(self.flat() - other.flat())))

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet(tuple(
            GradBlock(factor * b.weight, None if b.bias is None else factor * b.bias)
            for b in self.blocks))

    def is_zero_block(self, layer: int) -> bool:
        return not np.any(self.layer_flat(layer))

    @classmethod
    def zeros_like(cls, params: Parameters) -> "GradientSet":
        return cls(tuple(
            GradBlock(np.zeros_like(b.weight), None if b.bias is None else np.zeros_like(b.bias))
            for b in params.blocks()))


def _check_same_shapes(a: GradientSet, b: GradientSet) -> None:
    if len(a) != len(b):
        raise ShapeError(f"gradient sets have {len(a)} and {len(b)} layers")
    for i, (x, y) in enumerate(zip(a, b)):
        if x.weight.shape != y.weight.shape or (x.bias is None) != (y.bias is None) or (
                x.bias is not None and x.bias.shape != y.bias.shape):
            raise ShapeError(f"gradient block {i} shapes differ")


@dataclass(frozen=True)
class Precisions:
    """Diagonal inverse variances for latent layers 1..L-1, plus the output scale k."""
    inv_sigma: tuple
    output_scale: float = 1.0

    def __post_init__(self):
        sig = tuple(np.asarray(s, dtype=np.float64).reshape(-1) for s in self.inv_sigma)
        if any(np.any(s <= 0) or not np.all(np.isfinite(s)) for s in sig):
            raise ValueError("precisions must be finite and strictly positive")
        if not self.output_scale > 0:
            raise ValueError("output scale k must be positive")
        object.__setattr__(self, "inv_sigma", sig)

    @classmethod
    def identity(cls, params_or_spec, k: float = 1.0, scale: float = 1.0) -> "Precisions":
        spec = getattr(params_or_spec, "spec", params_or_spec)
        return cls(tuple(np.full(d, float(scale)) for d in spec.layer_dims[1:-1]), k)

    def of(self, layer: int) -> np.ndarray:
        """Precision vector of latent layer 1..L-1."""
        return self.inv_sigma[layer - 1]


@dataclass(frozen=True)
class InferenceConfig:
    variant: str = "fpa"
    gamma: float = 0.1
    steps: int = 10
    stop_tol: Optional[float] = None
    learning_rate: float = 0.1
    workers: int = 1
    # Z-IL: skip the updates of nodes above the scheduled layer
    zil_fast_path: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError("steps must be a non-negative integer")
        object.__setattr__(self, "steps", int(self.steps))
        if self.stop_tol is not None and not self.stop_tol > 0:
            raise ValueError("stop_tol must be > 0 when set")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class LatentState:
    """Inference variables.  Index 0 of ``x`` is the clamped input and index 0
    of ``e`` is unused (None), so both line up with layer numbers."""
    x: list
    e: list
    t: int = 0

    def copy(self) -> "LatentState":
        return LatentState([None if v is None else v.copy() for v in self.x],
                           [None if v is None else v.copy() for v in self.e], self.t)


@contextlib.contextmanager
def inject_fault(name: str):
    """Flip behaviour inside the PC dynamics for fault-injection checks.

    ``"pc-vjp-sign"`` negates the layer VJP used by the latent updates.
    """
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


def _pc_vjp(params, layer, point, cotangent):
    out = layer_vjp(params, layer, point, cotangent)
    return -out if "pc-vjp-sign" in _FAULTS else out


def _record(ledger, kind, layer, n=1):
    if ledger is not None:
        getattr(ledger, "record_" + kind)(layer, n)


def _map_layers(fn: Callable, layers, workers: int) -> list:
    layers = list(layers)
    if workers <= 1 or len(layers) <= 1:
        return [fn(i) for i in layers]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, layers))


def _check_divergence(x, step):
    for layer, v in enumerate(x):
        if layer == 0:
            continue
        biggest = float(np.max(np.abs(v))) if np.all(np.isfinite(v)) else float("inf")
        if biggest > DIVERGENCE_LIMIT:
            raise DivergenceError(step, layer, biggest)


# ---------------------------------------------------------------- backprop

def backprop_errors(trace: ForwardTrace, params: Parameters, ledger=None) -> list:
    """Backprop errors e_1..e_L (index 0 is None)."""
    L = params.spec.depth
    e = [None] * (L + 1)
    e[L] = loss_error(params.spec.loss, trace.mu[L], trace.target)
    _record(ledger, "vjp", L)
    for layer in range(L - 1, 0, -1):
        e[layer] = layer_vjp(params, layer, trace.mu[layer], e[layer + 1])
        _record(ledger, "vjp", layer)
    return e


def backprop(trace: ForwardTrace, params: Parameters, ledger=None) -> GradientSet:
    e = backprop_errors(trace, params, ledger)
    return GradientSet(tuple(
        param_vjp(params, layer, trace.mu[layer], e[layer + 1])
        for layer in range(params.spec.depth)))


def backprop_grad(params: Parameters, inputs, targets, ledger=None) -> GradientSet:
    trace = forward(params, inputs, targets)
    if ledger is not None:
        for layer in range(params.spec.depth):
            ledger.record_forward(layer, 1)
    return backprop(trace, params, ledger)


# ---------------------------------------------------------- variational PC

def _pc_predictions(params, x, mu1, ledger, workers):
    """f_{l-1}(x_{l-1}) for l = 1..L; f_0(x_0) is the cached mu_1."""
    L = params.spec.depth

    def pred(layer):
        if layer == 1:
            return mu1
        _record(ledger, "forward", layer - 1)
        return layer_forward(params, layer - 1, x[layer - 1])

    return [None] + _map_layers(pred, range(1, L + 1), workers)


def pc_errors(params, x, target, prec: Precisions, mu1, ledger=None, workers=1) -> list:
    """Generative PC errors; the output error carries the 1/k output scaling."""
    L = params.spec.depth
    preds = _pc_predictions(params, x, mu1, ledger, workers)
    e = [None] * (L + 1)
    for layer in range(1, L):
        e[layer] = x[layer] - preds[layer]
    e[L] = -loss_error(params.spec.loss, preds[L], target) / prec.output_scale
    _record(ledger, "vjp", L)
    return e


def _weighted(prec, e, layer, L):
    return e[layer] if layer == L else prec.of(layer) * e[layer]


def _pc_step(params, x, e, prec, gamma, ledger, workers, layers):
    L = params.spec.depth

    def new_value(layer):
        _record(ledger, "vjp", layer)
        bracket = prec.of(layer) * e[layer] - _pc_vjp(
            params, layer, x[layer], _weighted(prec, e, layer + 1, L))
        return x[layer] - gamma * bracket

    updated = _map_layers(new_value, layers, workers)
    new_x = list(x)
    for layer, v in zip(layers, updated):
        new_x[layer] = v
    return new_x


def _pc_gradients(params, x, e, prec, layers=None) -> list:
    L = params.spec.depth
    out = []
    for layer in (range(L) if layers is None else layers):
        g = param_vjp(params, layer, x[layer], _weighted(prec, e, layer + 1, L))
        out.append(GradBlock(-g.weight, None if g.bias is None else -g.bias))
    return out


def _initial_state(params, inputs, targets, ledger):
    trace = forward(params, inputs, targets)
    if ledger is not None:
        for layer in range(params.spec.depth):
            ledger.record_forward(layer, 1)
    return trace, [m.copy() for m in trace.mu[:-1]]


def vpc_inference(params: Parameters, inputs, targets, prec: Optional[Precisions] = None,
                  cfg: Optional[InferenceConfig] = None, ledger=None,
                  on_step: Optional[Callable[[LatentState], None]] = None):
    """Variational PC: T synchronous descent steps on the negative log joint,
    then parameter gradients at the final latent values.

    Returns ``(LatentState, GradientSet)``.  ``on_step`` sees the state at
    every t = 0..t_c (errors computed from that step's latents).
    """
    cfg = cfg or InferenceConfig(variant="vpc")
    if cfg.variant not in ("vpc", "zil"):
        raise ValueError(f"vpc_inference got variant {cfg.variant!r}")
    prec = prec or Precisions.identity(params)
    L = params.spec.depth
    trace, x = _initial_state(params, inputs, targets, ledger)
    mu1, target = trace.mu[1], trace.target
    e = pc_errors(params, x, target, prec, mu1, ledger, cfg.workers)
    t = 0
    if on_step is not None:
        on_step(LatentState(x, e, t))
    latents = list(range(1, L))
    while t < cfg.steps:
        new_x = _pc_step(params, x, e, prec, cfg.gamma, ledger, cfg.workers, latents)
        t += 1
        _check_divergence(new_x, t)
        delta = max((float(np.max(np.abs(new_x[i] - x[i]))) for i in latents), default=0.0)
        x = new_x
        e = pc_errors(params, x, target, prec, mu1, ledger, cfg.workers)
        if ledger is not None:
            ledger.record_step()
        if on_step is not None:
            on_step(LatentState(x, e, t))
        if cfg.stop_tol is not None and delta < cfg.stop_tol:
            if ledger is not None:
                ledger.record_early_stop(t)
            break
    grads = GradientSet(tuple(_pc_gradients(params, x, e, prec)))
    return LatentState(x, e, t), grads


def negative_log_joint(params: Parameters, x, target, prec: Precisions) -> float:
    """Batch-mean energy sum_l 0.5 e_l^T P_l e_l + E(f_{L-1}(x_{L-1}))/k."""
    L = params.spec.depth
    total = 0.0
    for layer in range(1, L):
        err = x[layer] - layer_forward(params, layer - 1, x[layer - 1])
        total += 0.5 * float(np.mean(np.sum(prec.of(layer) * err ** 2, axis=1)))
    pred = layer_forward(params, L - 1, x[L - 1])
    return total + loss_value(params.spec.loss, pred, target) / prec.output_scale


# ----------------------------------------------------------- Case 2 scaling

@dataclass(frozen=True)
class ScaledUpdate:
    """Both parameterisations of output-variance scaling by k."""
    grads: GradientSet
    output_variance_form: GradientSet
    latent_precision_form: GradientSet
    max_abs_diff: float


def variance_scaled_update(params: Parameters, inputs, targets, k: float,
                           cfg: Optional[InferenceConfig] = None,
                           tol: float = 1e-12) -> ScaledUpdate:
    """VPC update with the output variance inflated by k.

    The output-variance form shrinks the output error by 1/k and folds the
    compensating learning-rate factor k into the gradient.  The latent form
    multiplies the intermediate precisions by k, keeps the output fixed and
    runs inference with step gamma/k.  Both are computed and must agree.
    """
    if not k >= 1:
        raise ValueError("k must be >= 1")
    cfg = cfg or InferenceConfig(variant="vpc")
    cfg = replace(cfg, variant="vpc")
    _, g_out = vpc_inference(params, inputs, targets, Precisions.identity(params, k=k), cfg)
    g_out = g_out.scaled(k)
    _, g_lat = vpc_inference(params, inputs, targets, Precisions.identity(params, scale=k),
                             replace(cfg, gamma=cfg.gamma / k))
    diff = g_out.max_abs_diff(g_lat)
    if not diff <= tol:
        raise ArithmeticError(
            f"variance-scaling parameterisations disagree by {diff:.3g} (> {tol:g})")
    return ScaledUpdate(g_out, g_out, g_lat, diff)


# ------------------------------------------------------------------ FPA-PC

def fpa_inference(params: Parameters, inputs, targets, cfg: Optional[InferenceConfig] = None,
                  ledger=None, on_step: Optional[Callable[[LatentState], None]] = None):
    """FPA-PC: predictions and Jacobians frozen at the feed-forward pass.

    Errors are ``e_l = x_l - mu_l`` and the output error is the frozen loss
    gradient at mu_L.  Returns ``(LatentState, GradientSet)``.
    """
    cfg = cfg or InferenceConfig(variant="fpa")
    if cfg.variant != "fpa":
        raise ValueError(f"fpa_inference got variant {cfg.variant!r}")
    L = params.spec.depth
    trace, x = _initial_state(params, inputs, targets, ledger)
    mu = trace.mu
    out_cot = loss_error(params.spec.loss, mu[L], trace.target)
    _record(ledger, "vjp", L)
    latents = list(range(1, L))

    def errors(xs):
        return [None] + [xs[i] - mu[i] for i in latents] + [out_cot]

    e = errors(x)
    t = 0
    if on_step is not None:
        on_step(LatentState(x, e, t))

    def new_value(layer):
        _record(ledger, "vjp", layer)
        pulled = _pc_vjp(params, layer, mu[layer], e[layer + 1])
        return x[layer] - cfg.gamma * (e[layer] - pulled)

    while t < cfg.steps:
        updated = _map_layers(new_value, latents, cfg.workers)
        new_x = [x[0]] + updated
        t += 1
        _check_divergence(new_x, t)
        delta = max((float(np.max(np.abs(new_x[i] - x[i]))) for i in latents), default=0.0)
        x = new_x
        e = errors(x)
        if ledger is not None:
            ledger.record_step()
        if on_step is not None:
            on_step(LatentState(x, e, t))
        if cfg.stop_tol is not None and delta < cfg.stop_tol:
            if ledger is not None:
                ledger.record_early_stop(t)
            break
    grads = GradientSet(tuple(
        param_vjp(params, layer, mu[layer], e[layer + 1]) for layer in range(L)))
    return LatentState(x, e, t), grads


# -------------------------------------------------------------------- Z-IL

def zil_run(params: Parameters, inputs, targets, cfg: Optional[InferenceConfig] = None,
            ledger=None, *, _enforce: bool = True, _schedule: str = "zil") -> GradientSet:
    """Zero-divergence inference learning.

    Standard PC dynamics with identity precisions and gamma = 1; the gradient
    of theta_l is read off at step t = L - l - 1, the step at which e_{l+1}
    first carries signal.  ``_enforce`` and ``_schedule`` exist for ablation
    tests only: ``_schedule="final"`` reads every gradient at t = T instead.
    """
    L = params.spec.depth
    cfg = cfg or InferenceConfig(variant="zil", gamma=1.0, steps=L - 1)
    if cfg.variant != "zil":
        raise ValueError(f"zil_run got variant {cfg.variant!r}")
    if _enforce:
        if cfg.gamma != 1.0:
            raise RequirementError(
                f"Z-IL needs inference step size gamma = 1 (got {cfg.gamma}); "
                "other step sizes scale each error by gamma per layer and lose equivalence")
        if cfg.steps != L - 1:
            raise RequirementError(
                f"Z-IL runs exactly L-1 = {L - 1} inference steps (got {cfg.steps})")
        if cfg.stop_tol is not None:
            raise RequirementError("Z-IL has a fixed schedule; stop_tol is not allowed")
    if _schedule not in ("zil", "final"):
        raise ValueError(f"unknown schedule {_schedule!r}")
    prec = Precisions.identity(params)
    trace, x = _initial_state(params, inputs, targets, ledger)
    mu1, target = trace.mu[1], trace.target
    e = pc_errors(params, x, target, prec, mu1, ledger, cfg.workers)
    blocks = [None] * L
    T = cfg.steps
    for t in range(T + 1):
        if _schedule == "zil":
            layer = L - 1 - t
            if 0 <= layer < L:
                blocks[layer] = _pc_gradients(params, x, e, prec, [layer])[0]
        if t == T:
            break
        if cfg.zil_fast_path:
            active = [L - 1 - t] if L - 1 - t >= 1 else []
        else:
            active = list(range(1, L))
        x = _pc_step(params, x, e, prec, cfg.gamma, ledger, cfg.workers, active)
        _check_divergence(x, t + 1)
        e = pc_errors(params, x, target, prec, mu1, ledger, cfg.workers)
        if ledger is not None:
            ledger.record_step()
    if _schedule == "final":
        blocks = _pc_gradients(params, x, e, prec)
    for layer, b in enumerate(blocks):
        if b is None:
            # shorter-than-scheduled ablation run never reached this layer
            blocks[layer] = GradientSet.zeros_like(params)[layer]
    return GradientSet(tuple(blocks))


# ------------------------------------------------------------------ common

def run_engine(variant: str, params: Parameters, inputs, targets,
               cfg: Optional[InferenceConfig] = None, prec: Optional[Precisions] = None,
               ledger=None) -> GradientSet:
    """Dispatch to one engine and return only its gradients."""
    variant = canonical_variant(variant)
    if variant == "backprop":
        return backprop_grad(params, inputs, targets, ledger)
    if cfg is not None and cfg.variant != variant:
        cfg = replace(cfg, variant=variant)
    if variant == "vpc":
        return vpc_inference(params, inputs, targets, prec, cfg, ledger)[1]
    if variant == "fpa":
        return fpa_inference(params, inputs, targets, cfg, ledger)[1]
    return zil_run(params, inputs, targets, cfg, ledger)


def sgd_step(params: Parameters, grads: GradientSet, lr: float) -> Parameters:
    """theta <- theta - lr * grad; returns new Parameters."""
    if len(grads) != params.spec.depth:
        raise ShapeError(f"{len(grads)} gradient blocks for depth {params.spec.depth}")
    ws, bs = [], []
    for layer, (w, g) in enumerate(zip(params.weights, grads)):
        if g.weight.shape != w.shape:
            raise ShapeError(f"gradient block {layer} has shape {g.weight.shape}, expected {w.shape}")
        ws.append(w - lr * g.weight)
        if params.biases is not None:
            if g.bias is None or g.bias.shape != params.biases[layer].shape:
                raise ShapeError(f"gradient block {layer} bias shape mismatch")
            bs.append(params.biases[layer] - lr * g.bias)
    return Parameters(params.spec, tuple(ws), tuple(bs) if params.biases is not None else None)
