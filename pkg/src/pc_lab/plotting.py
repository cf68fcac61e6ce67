"""Figures written next to the CSV outputs of the command line."""
from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "font.size": 9,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_compare(rows, path):
    """Global cosine to backprop against relative inference steps."""
    curves = defaultdict(dict)
    for r in rows:
        curves[(r["depth"], r["gamma"])][r["rel_steps"]] = r["global_cosine"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for (depth, gamma), pts in sorted(curves.items()):
            xs = sorted(pts)
            ys = [pts[x] if pts[x] is not None else float("nan") for x in xs]
            ax.plot(xs, ys, marker="o", ms=3, label=f"depth {depth}, $\\gamma$={gamma:g}")
        ax.axvline(1.0, color="0.5", lw=0.8, ls="--")
        ax.set_xlabel("inference steps / depth")
        ax.set_ylabel("cosine similarity to backprop")
        ax.legend(ncol=2)
        return _save(fig, path)


def plot_trace(rows, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        by_variant = defaultdict(list)
        for r in rows:
            by_variant[r["variant"]].append(r)
        for i, (variant, rs) in enumerate(sorted(by_variant.items())):
            xs = [r["layer"] for r in rs]
            ys = [r["first_nonzero_step"] if r["first_nonzero_step"] != "never" else float("nan")
                  for r in rs]
            ax.plot([x + 0.08 * i for x in xs], ys, marker="os"[i % 2], ls="none", label=variant)
        xs = [r["layer"] for r in rows]
        ax.plot(sorted(set(xs)), [rows[0]["expected"] + rows[0]["layer"] - x
                                  for x in sorted(set(xs))], color="0.4", lw=0.8, label="L - l")
        ax.set_xlabel("layer l")
        ax.set_ylabel("first nonzero error step")
        ax.legend()
        return _save(fig, path)


def plot_bench(rows, path):
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.4))
        names = [r["variant"] for r in rows]
        a1.bar(names, [r["modeled_time"] for r in rows], color="tab:blue")
        a1.set_ylabel("modeled time (w*C units)")
        a2.bar(names, [r["measured_median_s"] for r in rows],
               yerr=[r["measured_iqr_s"] for r in rows], color="tab:orange")
        a2.set_ylabel("median wall clock (s)")
        return _save(fig, path)


def plot_train(rows, path):
    curves = defaultdict(list)
    for r in rows:
        if r["epoch"] != "final" and r["val_acc"] != "":
            curves[(r["variant"], r["rel_steps"], r["gamma"])].append((r["epoch"], r["val_acc"]))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for (variant, rel, gamma), pts in sorted(curves.items(), key=lambda kv: str(kv[0])):
            label = variant if rel == "" else f"{variant} rel={rel} $\\gamma$={gamma}"
            ax.plot(*zip(*pts), marker="o", ms=3, label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation accuracy")
        ax.legend()
        return _save(fig, path)
