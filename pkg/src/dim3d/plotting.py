"""Figures written next to the CSV outputs. Headless and byte-reproducible."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so reruns produce identical bytes
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def loss_curve(losses, path, window: int = 50) -> None:
    losses = np.asarray(losses, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = np.arange(1, len(losses) + 1)
    ax.plot(steps, losses, lw=0.6, alpha=0.4, label="per step")
    if len(losses) >= window:
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1:], smooth, lw=1.5, label=f"{window}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("noise-prediction MSE")
    ax.legend()
    _save(fig, path)


def flops_scaling(rows: list[dict], path) -> None:
    """Log-log FLOPs against token count, one line pair per model."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for model in dict.fromkeys(r["model"] for r in rows):
        sel = [r for r in rows if r["model"] == model]
        L = [int(r["tokens"]) for r in sel]
        ax.plot(L, [int(r["dim_flops"]) for r in sel], "o-", label=f"DiM {model}")
        ax.plot(L, [int(r["attn_flops"]) for r in sel], "s--", label=f"attention {model}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("tokens")
    ax.set_ylabel("FLOPs")
    ax.legend(fontsize=7)
    _save(fig, path)


def metrics_bars(fields: dict, path) -> None:
    keys = [k for k in fields if k.startswith(("one_nna", "cov"))]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(keys, [fields[k] for k in keys])
    ax.axhline(50.0, color="gray", lw=0.8, ls=":")
    ax.set_ylim(0, 100)
    ax.set_ylabel("percent")
    _save(fig, path)


def clouds(points: list[np.ndarray], path, titles: list[str] | None = None) -> None:
    n = len(points)
    fig = plt.figure(figsize=(3 * n, 3))
    for i, p in enumerate(points):
        ax = fig.add_subplot(1, n, i + 1, projection="3d")
        ax.scatter(p[:, 0], p[:, 1], p[:, 2], s=2)
        if titles:
            ax.set_title(titles[i], fontsize=8)
        ax.set_axis_off()
    _save(fig, path)
