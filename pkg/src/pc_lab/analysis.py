"""Propagation tracing, cost accounting, timing and gradient similarity."""
from __future__ import annotations

import os
import statistics
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .chain import ChainSpec, Parameters, loss_error, forward
from .engines import (
    GradientSet, InferenceConfig, Precisions, _check_same_shapes, canonical_variant,
    fpa_inference, run_engine, vpc_inference,
)

CHEAP_GRADIENT_CONSTANT = 3


# ------------------------------------------------------------------ tracing

@dataclass(frozen=True)
class TraceReport:
    """First inference step at which each error e_l is bitwise nonzero.

    ``first_nonzero_step`` maps layer l = 1..L to a step or None ("never").
    """
    variant: str
    depth: int
    steps: int
    first_nonzero_step: dict
    warning: Optional[str] = None

    def expected(self, layer: int) -> int:
        return self.depth - layer

    def matches_expected(self) -> bool:
        return all(self.first_nonzero_step.get(l) == self.depth - l
                   for l in range(1, self.depth + 1))


def trace_first_nonzero(variant: str, params: Parameters, inputs, targets,
                        cfg: Optional[InferenceConfig] = None,
                        prec: Optional[Precisions] = None) -> TraceReport:
    variant = canonical_variant(variant)
    L = params.spec.depth
    if cfg is None:
        cfg = InferenceConfig(variant=variant, gamma=1.0, steps=L)
    cfg = replace(cfg, variant=variant, stop_tol=None)
    trace = forward(params, inputs, targets)
    if not np.any(loss_error(params.spec.loss, trace.mu[L], trace.target)):
        msg = "zero output loss gradient: propagation precondition unmet, no error ever appears"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return TraceReport(variant, L, cfg.steps, {l: None for l in range(1, L + 1)}, msg)
    first: dict = {l: None for l in range(1, L + 1)}

    def watch(state):
        for l in range(1, L + 1):
            if first[l] is None and np.any(state.e[l] != 0.0):
                first[l] = state.t

    if variant == "fpa":
        fpa_inference(params, inputs, targets, cfg, on_step=watch)
    elif variant in ("vpc", "zil"):
        vpc_cfg = replace(cfg, variant="vpc")
        vpc_inference(params, inputs, targets, prec, vpc_cfg, on_step=watch)
    else:
        raise ValueError("tracing needs an inference variant (vpc, fpa or zil)")
    return TraceReport(variant, L, cfg.steps, first)


# ------------------------------------------------------------- cost ledger

@dataclass
class CostLedger:
    """Operation counts recorded by the engines plus the modeled times.

    Index l of ``forward_evals`` / ``vjp_evals`` is layer f_l; index L is
    the loss layer.  Modeled times are in units of w * C with w = 1.
    """
    depth: int
    forward_evals: np.ndarray = None
    vjp_evals: np.ndarray = None
    inference_steps: int = 0
    early_stop_step: Optional[int] = None
    cost_units: Optional[np.ndarray] = None
    modeled_time_backprop: Optional[float] = None
    modeled_time_variant: Optional[float] = None
    variant: Optional[str] = None
    t_c: Optional[int] = None

    def __post_init__(self):
        if self.forward_evals is None:
            self.forward_evals = np.zeros(self.depth + 1, dtype=np.int64)
        if self.vjp_evals is None:
            self.vjp_evals = np.zeros(self.depth + 1, dtype=np.int64)

    def record_forward(self, layer: int, n: int = 1) -> None:
        self.forward_evals[layer] += n

    def record_vjp(self, layer: int, n: int = 1) -> None:
        self.vjp_evals[layer] += n

    def record_step(self) -> None:
        self.inference_steps += 1

    def record_early_stop(self, step: int) -> None:
        self.early_stop_step = step

    @property
    def total_vjp_evals(self) -> int:
        return int(self.vjp_evals.sum())

    @property
    def bound_satisfied(self) -> Optional[bool]:
        if self.modeled_time_variant is None:
            return None
        return self.modeled_time_variant >= self.modeled_time_backprop


def layer_costs(spec: ChainSpec) -> np.ndarray:
    """C_l = 2 d_l d_{l+1} multiply-adds plus d_{l+1} activation ops."""
    d = np.asarray(spec.layer_dims, dtype=np.float64)
    return 2.0 * d[:-1] * d[1:] + d[1:]


def modeled_times(costs: Sequence[float], variant: str, t_c: int,
                  constant: float = CHEAP_GRADIENT_CONSTANT) -> tuple:
    """(backprop time, variant time) under maximal per-step parallelism.

    Backprop pays one forward plus one VJP (``constant - 1`` forwards) per
    layer.  An inference variant pays the forward pass and then t_c steps,
    each as slow as the slowest VJP; VPC also re-evaluates its predictions
    every step, adding one more C_max.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 1 or c.size == 0 or np.any(c <= 0):
        raise ValueError("costs must be a non-empty vector of positive numbers")
    if t_c < 0:
        raise ValueError("t_c must be >= 0")
    variant = canonical_variant(variant)
    vjp_factor = constant - 1
    t_bp = float(c.sum() + vjp_factor * c.sum())
    if variant == "backprop":
        return t_bp, t_bp
    per_step = vjp_factor * c.max()
    if variant == "vpc":
        per_step += c.max()
    return t_bp, float(c.sum() + t_c * per_step)


def cost_model(spec: ChainSpec, variant: str, t_c: int,
               constant: float = CHEAP_GRADIENT_CONSTANT) -> CostLedger:
    costs = layer_costs(spec)
    t_bp, t_var = modeled_times(costs, variant, t_c, constant)
    return CostLedger(spec.depth, cost_units=costs, modeled_time_backprop=t_bp,
                      modeled_time_variant=t_var, variant=canonical_variant(variant), t_c=t_c)


# ------------------------------------------------------------------ timing

@dataclass(frozen=True)
class RuntimeStats:
    variant: str
    samples: tuple
    median: float
    iqr: float
    metadata: dict = field(default_factory=dict)


def _thread_limits(threads: Optional[int]):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        import contextlib
        return contextlib.nullcontext()
    return threadpool_limits(limits=threads) if threads else threadpool_limits(limits=None)


def measure_runtime(variant: str, params: Parameters, inputs, targets,
                    cfg: Optional[InferenceConfig] = None, repetitions: int = 5,
                    threads: Optional[int] = 1) -> RuntimeStats:
    """Wall-clock statistics of one gradient computation.

    ``variant="forward"`` times the forward pass alone.  One warm-up call is
    made and discarded.
    """
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    if variant == "forward":
        def run():
            forward(params, inputs, targets)
    else:
        name = canonical_variant(variant)
        def run():
            run_engine(name, params, inputs, targets, cfg)
    samples = []
    with _thread_limits(threads):
        run()
        for _ in range(repetitions):
            start = time.perf_counter()
            run()
            samples.append(time.perf_counter() - start)
    q1, q3 = np.percentile(samples, [25, 75])
    meta = {
        "blas_threads": threads if threads else "default",
        "layer_workers": cfg.workers if cfg is not None else 1,
        "cpu_count": os.cpu_count(),
    }
    return RuntimeStats(variant, tuple(samples), statistics.median(samples), float(q3 - q1), meta)


# -------------------------------------------------------------- similarity

@dataclass(frozen=True)
class SimilarityReport:
    """Per-layer cosines (None when either block is all zero) and the global cosine."""
    per_layer: tuple
    global_cosine: Optional[float]
    zero_block: tuple


def _cosine(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def compare_gradients(a: GradientSet, b: GradientSet) -> SimilarityReport:
    _check_same_shapes(a, b)
    per_layer, zero = [], []
    for layer in range(len(a)):
        fa, fb = a.layer_flat(layer), b.layer_flat(layer)
        per_layer.append(_cosine(fa, fb))
        zero.append(not np.any(fa) or not np.any(fb))
    return SimilarityReport(tuple(per_layer), _cosine(a.flat(), b.flat()), tuple(zero))
