"""Figures written next to the CLI's CSV/JSON reports.

Uses :class:`matplotlib.figure.Figure` directly, so no GUI backend or
global pyplot state is involved.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from .reduction import STAGES

STYLE = {"linewidth": 1.2, "markersize": 4}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    return path


def figure_path(out, suffix: str) -> Path:
    """``report.csv`` -> ``report_<suffix>.png`` in the same directory."""
    out = Path(out)
    return out.with_name(f"{out.stem}_{suffix}.png")


def plot_bench(rows: list[dict], path) -> Path:
    """Time ratio against batch size, one line per thread count."""
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    for threads in sorted({r["threads"] for r in rows}):
        sel = sorted((r for r in rows if r["threads"] == threads), key=lambda r: r["N"])
        ax.plot([r["N"] for r in sel], [r["time_ratio"] for r in sel], "o-",
                label=f"{threads} thread{'s' if threads > 1 else ''}", **STYLE)
    ax.set_xscale("log", base=2)
    ax.axhline(1.0, color="0.6", linewidth=0.8, linestyle="--")
    ax.set_xlabel("batch size N")
    ax.set_ylabel("time / time(N=1, 1 thread)")
    ax.set_title(rows[0]["case"] if rows else "")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_stage_breakdown(timings: dict, path, title: str = "") -> Path:
    fig = Figure(figsize=(5, 3))
    ax = fig.add_subplot()
    ms = [1e3 * timings.get(s, 0.0) for s in STAGES]
    ax.barh(list(STAGES), ms, color="0.35")
    ax.set_xlabel("wall time (ms)")
    ax.set_title(title)
    return _save(fig, path)


def plot_hessian(H: np.ndarray, path, title: str = "") -> Path:
    """``log10 |H|`` as an image."""
    fig = Figure(figsize=(4.5, 4))
    ax = fig.add_subplot()
    with np.errstate(divide="ignore"):
        img = np.log10(np.abs(H))
    img[~np.isfinite(img)] = np.nan
    im = ax.imshow(img, cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, label="log10 |H_ij|")
    ax.set_title(title or f"reduced Hessian {H.shape[0]} x {H.shape[1]}")
    return _save(fig, path)


def plot_tracking(trace, path, title: str = "") -> Path:
    """Cost along time (tracked and optimal) and parameter deviations."""
    t = trace.column("t")
    fig = Figure(figsize=(6, 5))
    ax1, ax2 = fig.subplots(2, 1, sharex=True)
    ax1.plot(t, trace.column("cost"), "-", label="tracking", **STYLE)
    opt = trace.column("cost_optimal")
    if np.any(np.isfinite(opt)):
        ax1.plot(t, opt, "--", label="optimal", **STYLE)
    ax1.set_ylabel("cost ($/h)")
    ax1.legend(frameon=False)
    ax1.set_title(title)
    dev = trace.column("max_dev")
    if np.any(np.isfinite(dev)):
        ax2.semilogy(t, dev, "-", label="max |p - p*|", **STYLE)
        ax2.semilogy(t, trace.column("median_dev"), "-", label="median |p - p*|", **STYLE)
    else:
        ax2.semilogy(t, trace.column("grad_norm"), "-", label="|grad F|", **STYLE)
    ax2.set_xlabel("period")
    ax2.legend(frameon=False)
    return _save(fig, path)
