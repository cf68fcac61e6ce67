"""Row producers behind the CLI subcommands.

Each function takes a validated :class:`RunConfig` and returns a list of
dicts keyed by the CSV columns of its subcommand.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .analysis import (
    compare_gradients, cost_model, measure_runtime, modeled_times, trace_first_nonzero,
)
from .chain import ChainSpec, Parameters
from .config import RunConfig, relative_steps
from .data import load_mnist, synthetic_splits
from .engines import (
    InferenceConfig, Precisions, backprop_grad, fpa_inference, inject_fault,
    variance_scaled_update, zil_run,
)
from .oracle import finite_difference_grad
from .train import train

COMPARE_COLUMNS = ["depth", "width", "variant", "gamma", "steps", "rel_steps", "layer",
                   "cosine", "zero_block_flag", "global_cosine", "seed"]
TRACE_COLUMNS = ["variant", "layer", "first_nonzero_step", "expected", "match_flag", "warning"]
BENCH_COLUMNS = ["variant", "modeled_time", "measured_median_s", "measured_iqr_s",
                 "bound_satisfied", "steps", "blas_threads"]
TRAIN_COLUMNS = ["epoch", "variant", "rel_steps", "gamma", "val_acc", "test_acc", "status"]


def load_splits(cfg: RunConfig) -> dict:
    ds = cfg.dataset
    if ds.source == "mnist":
        return load_mnist(ds.data_dir)
    seed = cfg.seed if ds.seed is None else ds.seed
    return synthetic_splits(seed, ds.d_in, ds.n_classes, ds.n_train, ds.n_validation, ds.n_test)


def _dims(splits):
    tr = splits["train"]
    return tr.inputs.shape[1], tr.targets.shape[1]


def _depths(cfg: RunConfig):
    if cfg.sweep is not None and cfg.sweep.depths:
        return cfg.sweep.depths
    return [None]


def _sweep(cfg: RunConfig):
    if cfg.sweep is None:
        return [cfg.gamma], [cfg.rel_steps]
    return cfg.sweep.gammas, cfg.sweep.rel_steps


def _probe(cfg, splits):
    tr = splits["train"]
    n = min(len(tr), cfg.probe_size or len(tr))
    return tr.inputs[:n], tr.targets[:n]


# ----------------------------------------------------------------- compare

def compare_rows(cfg: RunConfig, splits: Optional[dict] = None) -> list:
    """FPA-PC gradients against backprop over (depth, gamma, rel_steps)."""
    splits = splits or load_splits(cfg)
    d_in, d_out = _dims(splits)
    x, t = _probe(cfg, splits)
    gammas, rels = _sweep(cfg)
    rows = []
    for depth in _depths(cfg):
        spec = cfg.chain_spec(d_in, d_out, depth)
        params = Parameters.init(spec, np.random.default_rng(cfg.seed), bias=cfg.spec.bias)
        ref = backprop_grad(params, x, t)
        L = spec.depth
        for gamma in gammas:
            for rel in rels:
                steps = relative_steps(L, rel)
                _, g = fpa_inference(params, x, t, InferenceConfig("fpa", gamma, steps))
                rep = compare_gradients(g, ref)
                for layer in range(L):
                    rows.append({
                        "depth": L, "width": cfg.spec.width, "variant": "fpa",
                        "gamma": gamma, "steps": steps, "rel_steps": rel, "layer": layer,
                        "cosine": rep.per_layer[layer], "zero_block_flag": rep.zero_block[layer],
                        "global_cosine": rep.global_cosine, "seed": cfg.seed,
                    })
    return rows


# ------------------------------------------------------------------- trace

def trace_rows(cfg: RunConfig, splits: Optional[dict] = None, zero_loss: bool = False) -> list:
    splits = splits or load_splits(cfg)
    d_in, d_out = _dims(splits)
    spec = cfg.chain_spec(d_in, d_out)
    params = Parameters.init(spec, np.random.default_rng(cfg.seed), bias=cfg.spec.bias)
    x, t = _probe(cfg, splits)
    if zero_loss:
        from .chain import forward
        if spec.loss != "squared-euclidean":
            raise ValueError("a zero-loss probe needs the squared-euclidean loss")
        t = forward(params, x, t).mu[-1]
    L = spec.depth
    variants = (cfg.sweep.variants if cfg.sweep and cfg.sweep.variants else ["vpc", "fpa"])
    steps = max(cfg.steps if cfg.steps is not None else L, L)
    rows = []
    for variant in variants:
        rep = trace_first_nonzero(variant, params, x, t,
                                  InferenceConfig(variant, cfg.gamma, steps))
        for layer in range(1, L + 1):
            got = rep.first_nonzero_step[layer]
            rows.append({
                "variant": variant, "layer": layer,
                "first_nonzero_step": "never" if got is None else got,
                "expected": L - layer, "match_flag": got == L - layer,
                "warning": rep.warning or "",
            })
    return rows


# ------------------------------------------------------------------- bench

def bench_rows(cfg: RunConfig, threads: Optional[int] = 1) -> list:
    """Modeled and measured cost of backprop, FPA-PC and Z-IL on one chain."""
    width = cfg.spec.width
    if cfg.spec.layer_dims is not None:
        spec = cfg.chain_spec(0, 0)
    else:
        spec = ChainSpec.uniform(cfg.spec.depth, width, width, width, "tanh",
                                 loss="squared-euclidean")
    L = spec.depth
    rng = np.random.default_rng(cfg.seed)
    params = Parameters.init(spec, rng, bias=cfg.spec.bias)
    x = rng.uniform(size=(cfg.batch_size, spec.layer_dims[0]))
    t = rng.normal(size=(cfg.batch_size, spec.layer_dims[-1]))
    fpa_steps = cfg.steps if cfg.steps is not None else 4 * L
    plans = [
        ("backprop", None, 0),
        ("fpa", InferenceConfig("fpa", cfg.gamma, fpa_steps), fpa_steps),
        ("zil", InferenceConfig("zil", 1.0, L - 1), L - 1),
    ]
    rows = []
    for variant, icfg, steps in plans:
        # step 0 (the output error) counts as one parallel step: t_c = T + 1
        ledger = cost_model(spec, variant, steps + 1)
        t_bp, t_var = ledger.modeled_time_backprop, ledger.modeled_time_variant
        stats = measure_runtime(variant, params, x, t, icfg, cfg.repetitions, threads)
        rows.append({
            "variant": variant, "modeled_time": t_var,
            "measured_median_s": stats.median, "measured_iqr_s": stats.iqr,
            "bound_satisfied": t_var >= t_bp, "steps": steps,
            "blas_threads": stats.metadata["blas_threads"],
        })
    return rows


# ------------------------------------------------------------------- train

def train_rows(cfg: RunConfig, splits: Optional[dict] = None) -> tuple:
    """Returns (rows, diverged)."""
    splits = splits or load_splits(cfg)
    d_in, d_out = _dims(splits)
    spec = cfg.chain_spec(d_in, d_out)
    L = spec.depth
    runs = []
    if cfg.sweep is not None:
        runs.append(("backprop", None, None))
        for variant in (cfg.sweep.variants or ["fpa"]):
            if variant == "backprop":
                continue
            for gamma in cfg.sweep.gammas:
                for rel in cfg.sweep.rel_steps:
                    runs.append((variant, gamma, rel))
    else:
        runs.append((cfg.variant, None if cfg.variant == "backprop" else cfg.gamma,
                     None if cfg.variant == "backprop" else cfg.rel_steps))
    rows, diverged = [], False
    for variant, gamma, rel in runs:
        icfg = None
        if variant == "zil":
            icfg = InferenceConfig("zil", 1.0, L - 1)
        elif variant != "backprop":
            steps = cfg.steps if (cfg.sweep is None and cfg.steps is not None) \
                else relative_steps(L, rel)
            icfg = InferenceConfig(variant, gamma, steps, cfg.stop_tol)
        prec = Precisions.identity(spec, k=cfg.k) if variant == "vpc" else None
        rec, _ = train(spec, splits, variant, icfg, cfg.epochs, cfg.learning_rate,
                       cfg.batch_size, cfg.seed, bias=cfg.spec.bias, prec=prec)
        common = {"variant": variant, "rel_steps": "" if rel is None else rel,
                  "gamma": "" if gamma is None else gamma}
        for epoch, acc in rec.rows():
            rows.append({"epoch": epoch, **common, "val_acc": acc, "test_acc": "",
                         "status": "ok"})
        rows.append({"epoch": "final", **common, "val_acc": "",
                     "test_acc": "" if rec.test_acc is None else rec.test_acc,
                     "status": rec.status})
        diverged |= rec.status == "diverged"
    return rows, diverged


# ------------------------------------------------------------------- check

@dataclass
class CheckResult:
    name: str
    passed: bool
    tolerance: str
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<38} tol {self.tolerance:<22} {self.detail}"


def _random_instance(rng, depth, loss="squared-euclidean", max_width=8, bias=True):
    dims = [int(rng.integers(1, max_width + 1)) for _ in range(depth + 1)]
    if loss == "softmax-cross-entropy":
        dims[-1] = max(dims[-1], 2)
    acts = [str(rng.choice(["tanh", "identity", "relu"])) for _ in range(depth)]
    spec = ChainSpec(tuple(dims), tuple(acts), loss)
    params = Parameters.init(spec, rng, bias=bias, bias_scale=0.2 if bias else 0.0)
    n = int(rng.integers(1, 4))
    x = rng.normal(size=(n, dims[0]))
    if loss == "softmax-cross-entropy":
        t = np.eye(dims[-1])[rng.integers(0, dims[-1], size=n)]
    else:
        t = rng.normal(size=(n, dims[-1]))
    return params, x, t


def run_checks(cfg: RunConfig, fault: Optional[str] = None) -> list:
    """Small-scale invariant suite; ``fault`` names an injected defect."""
    ctx = inject_fault(fault) if fault else contextlib.nullcontext()
    rng = np.random.default_rng(cfg.seed)
    results = []
    with ctx:
        worst = 0.0
        for i in range(10):
            loss = ("squared-euclidean", "softmax-cross-entropy")[i % 2]
            params, x, t = _random_instance(rng, int(rng.integers(2, 5)), loss)
            g, fd = backprop_grad(params, x, t), finite_difference_grad(params, x, t)
            denom = max(np.linalg.norm(fd.flat()), 1e-12)
            worst = max(worst, np.linalg.norm(g.flat() - fd.flat()) / denom)
        results.append(CheckResult("backprop vs finite differences", worst < 1e-6,
                                   "rel err < 1e-6", f"worst {worst:.2e}"))

        zil_worst, fpa_worst = 0.0, 0.0
        for i in range(20):
            loss = ("squared-euclidean", "softmax-cross-entropy")[i % 2]
            depth = int(rng.integers(2, 9))
            params, x, t = _random_instance(rng, depth, loss)
            ref = backprop_grad(params, x, t)
            zil_worst = max(zil_worst, zil_run(params, x, t).max_abs_diff(ref))
            _, g = fpa_inference(params, x, t, InferenceConfig("fpa", 1.0, depth - 1))
            fpa_worst = max(fpa_worst, g.max_abs_diff(ref))
        results.append(CheckResult("Z-IL equals backprop", zil_worst <= 1e-12,
                                   "max abs diff <= 1e-12", f"worst {zil_worst:.2e}"))
        results.append(CheckResult("FPA (gamma=1, T=L-1) equals backprop", fpa_worst <= 1e-12,
                                   "max abs diff <= 1e-12", f"worst {fpa_worst:.2e}"))

        bad = []
        for gamma in (0.25, 0.5, 1.0):
            spec = ChainSpec.uniform(6, 5, 7, 3, "tanh")
            params = Parameters.init(spec, rng, bias=False)
            x, t = rng.normal(size=(2, 5)), rng.normal(size=(2, 3))
            for variant in ("vpc", "fpa"):
                rep = trace_first_nonzero(variant, params, x, t, InferenceConfig(variant, gamma, 6))
                if not rep.matches_expected():
                    bad.append(f"{variant}@{gamma}")
        results.append(CheckResult("first nonzero error at t = L - l", not bad, "exact",
                                   "all match" if not bad else "mismatch: " + ",".join(bad)))

        violations, equality = 0, True
        for _ in range(1000):
            L = int(rng.integers(1, 12))
            costs = rng.uniform(0.1, 10.0, size=L)
            t_c = L + int(rng.integers(0, 3 * L + 1))
            for variant in ("fpa", "zil"):
                t_bp, t_var = modeled_times(costs, variant, t_c)
                violations += t_var < t_bp
        for L in range(1, 9):
            t_bp, t_var = modeled_times(np.full(L, 3.0), "fpa", L)
            equality &= t_bp == t_var
        results.append(CheckResult("time bound FPA/Z-IL >= backprop", violations == 0 and equality,
                                   "exact (1000 samples)",
                                   f"{violations} violations, uniform equality {equality}"))

        spec = ChainSpec.uniform(3, 4, 5, 2, "tanh")
        params = Parameters.init(spec, rng, bias=False)
        x, t = rng.normal(size=(1, 4)), rng.normal(size=(1, 2))
        diffs = [variance_scaled_update(params, x, t, k, InferenceConfig("vpc", 0.1, 300),
                                        tol=np.inf).max_abs_diff for k in (10.0, 100.0)]
        results.append(CheckResult("variance scaling parameterisations", max(diffs) <= 1e-12,
                                   "max abs diff <= 1e-12", f"worst {max(diffs):.2e}"))
    return results
