"""Independent reference computations used to check the engines.

Nothing here touches the VJP code in :mod:`pc_lab.chain`; the forward pass
and the losses are re-implemented scalar by scalar.
"""
from __future__ import annotations

import math

import numpy as np

from .chain import GradBlock, Parameters
from .engines import GradientSet


def _act(kind, z):
    if kind == "tanh":
        return math.tanh(z)
    if kind == "relu":
        return z if z > 0.0 else 0.0
    return z


def _layer(w, b, kind, x):
    out = []
    for i in range(len(w)):
        s = 0.0
        for j in range(len(x)):
            s += w[i][j] * x[j]
        if b is not None:
            s += b[i]
        out.append(_act(kind, s))
    return out


def _loss(kind, p, t):
    if kind == "squared-euclidean":
        return 0.5 * sum((a - b) ** 2 for a, b in zip(p, t))
    m = max(p)
    lse = m + math.log(sum(math.exp(a - m) for a in p))
    return -sum(b * (a - lse) for a, b in zip(p, t))


def reference_forward(params: Parameters, x0, target):
    """Plain-Python re-evaluation of the chain for one sample: (states, loss)."""
    spec = params.spec
    ws = [w.tolist() for w in params.weights]
    bs = [None] * len(ws) if params.biases is None else [b.tolist() for b in params.biases]
    states = [list(map(float, x0))]
    for layer in range(spec.depth):
        states.append(_layer(ws[layer], bs[layer], spec.activations[layer], states[-1]))
    return states, _loss(spec.loss, states[-1], list(map(float, target)))


def reference_loss(params: Parameters, inputs, targets) -> float:
    x = np.atleast_2d(inputs)
    t = np.atleast_2d(targets)
    return sum(reference_forward(params, xi, ti)[1] for xi, ti in zip(x, t)) / x.shape[0]


def _with_entry(params, which, layer, index, value):
    ws = list(params.weights)
    bs = None if params.biases is None else list(params.biases)
    if which == "weight":
        a = ws[layer].copy()
        a[index] = value
        ws[layer] = a
    else:
        a = bs[layer].copy()
        a[index] = value
        bs[layer] = a
    return Parameters(params.spec, tuple(ws), None if bs is None else tuple(bs))


def finite_difference_grad(params: Parameters, inputs, targets, eps: float = 1e-5) -> GradientSet:
    """Central differences (E(theta + eps) - E(theta - eps)) / (2 eps) per entry."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    blocks = []
    for layer in range(params.spec.depth):
        parts = {}
        for which in ("weight", "bias"):
            if which == "bias" and params.biases is None:
                parts["bias"] = None
                continue
            base = params.weights[layer] if which == "weight" else params.biases[layer]
            g = np.zeros_like(base)
            for index in np.ndindex(base.shape):
                v = base[index]
                up = reference_loss(_with_entry(params, which, layer, index, v + eps), inputs, targets)
                down = reference_loss(_with_entry(params, which, layer, index, v - eps), inputs, targets)
                g[index] = (up - down) / (2.0 * eps)
            parts[which] = g
        blocks.append(GradBlock(parts["weight"], parts["bias"]))
    return GradientSet(tuple(blocks))


def reference_energy(params: Parameters, latents, x0, target, inv_sigma=None, k: float = 1.0) -> float:
    """Negative log joint of one sample with latents x_1..x_{L-1} (plain Python)."""
    spec = params.spec
    ws = [w.tolist() for w in params.weights]
    bs = [None] * len(ws) if params.biases is None else [b.tolist() for b in params.biases]
    xs = [list(map(float, x0))] + [list(map(float, v)) for v in latents]
    total = 0.0
    for layer in range(1, spec.depth):
        pred = _layer(ws[layer - 1], bs[layer - 1], spec.activations[layer - 1], xs[layer - 1])
        prec = [1.0] * len(pred) if inv_sigma is None else list(inv_sigma[layer - 1])
        total += 0.5 * sum(p * (a - b) ** 2 for p, a, b in zip(prec, xs[layer], pred))
    out = _layer(ws[-1], bs[-1], spec.activations[-1], xs[-1])
    return total + _loss(spec.loss, out, list(map(float, target))) / k


def energy_gradient_fd(params: Parameters, latents, x0, target, inv_sigma=None, k: float = 1.0,
                       eps: float = 1e-6) -> list:
    """Central-difference gradient of :func:`reference_energy` w.r.t. each latent."""
    grads = []
    for li, v in enumerate(latents):
        g = np.zeros(len(v))
        for j in range(len(v)):
            up = [np.array(a, dtype=float) for a in latents]
            down = [np.array(a, dtype=float) for a in latents]
            up[li][j] += eps
            down[li][j] -= eps
            g[j] = (reference_energy(params, up, x0, target, inv_sigma, k)
                    - reference_energy(params, down, x0, target, inv_sigma, k)) / (2 * eps)
        grads.append(g)
    return grads
