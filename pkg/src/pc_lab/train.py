"""Minibatch SGD training with any gradient engine."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .analysis import compare_gradients
from .chain import ChainSpec, Parameters, forward
from .data import Dataset
from .engines import (
    DivergenceError, InferenceConfig, Precisions, backprop_grad, canonical_variant,
    run_engine, sgd_step,
)

log = logging.getLogger(__name__)


@dataclass
class TrainRunRecord:
    config: dict
    val_acc: list = field(default_factory=list)
    probe_cosine: list = field(default_factory=list)
    test_acc: Optional[float] = None
    status: str = "ok"
    message: str = ""

    def rows(self):
        for epoch, acc in enumerate(self.val_acc, start=1):
            yield epoch, acc


def accuracy(params: Parameters, ds: Dataset, batch: int = 2048) -> float:
    labels = ds.labels if ds.labels is not None else np.argmax(ds.targets, axis=1)
    hits = 0
    for start in range(0, len(ds), batch):
        sl = slice(start, start + batch)
        out = forward(params, ds.inputs[sl], ds.targets[sl]).mu[-1]
        hits += int(np.sum(np.argmax(out, axis=1) == labels[sl]))
    return hits / len(ds)


def train(spec: ChainSpec, splits: dict, variant: str, cfg: Optional[InferenceConfig],
          epochs: int, lr: float, batch_size: int, seed: int, *,
          bias: bool = True, prec: Optional[Precisions] = None,
          probe_size: int = 0, params: Optional[Parameters] = None) -> tuple:
    """Train and evaluate; returns ``(TrainRunRecord, final Parameters)``.

    ``splits`` holds ``train`` / ``validation`` / ``test`` datasets.  With
    ``probe_size > 0`` the cosine between this engine's gradient and the
    backprop gradient on a fixed probe batch is logged every epoch.
    """
    variant = canonical_variant(variant)
    if epochs < 0 or batch_size < 1 or not lr > 0:
        raise ValueError("need epochs >= 0, batch_size >= 1 and lr > 0")
    rng = np.random.default_rng(seed)
    if params is None:
        params = Parameters.init(spec, rng, bias=bias)
    record = TrainRunRecord({
        "variant": variant, "gamma": None if cfg is None else cfg.gamma,
        "steps": None if cfg is None else cfg.steps, "depth": spec.depth,
        "layer_dims": list(spec.layer_dims), "seed": seed, "lr": lr,
        "batch_size": batch_size, "epochs": epochs,
    })
    train_ds = splits["train"]
    probe = train_ds.subset(slice(0, probe_size)) if probe_size else None
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_ds))
        try:
            for start in range(0, len(order), batch_size):
                idx = order[start:start + batch_size]
                g = run_engine(variant, params, train_ds.inputs[idx], train_ds.targets[idx],
                               cfg, prec)
                params = sgd_step(params, g, lr)
        except DivergenceError as exc:
            record.status, record.message = "diverged", str(exc)
            log.warning("epoch %d: %s", epoch, exc)
            return record, params
        record.val_acc.append(accuracy(params, splits["validation"]))
        if probe is not None:
            ref = backprop_grad(params, probe.inputs, probe.targets)
            mine = run_engine(variant, params, probe.inputs, probe.targets, cfg, prec)
            record.probe_cosine.append(compare_gradients(mine, ref).global_cosine)
        log.info("epoch %d  val_acc %.4f", epoch, record.val_acc[-1])
    record.test_acc = accuracy(params, splits["test"])
    return record, params
