"""SVG figures: score heatmaps, radius-error profiles, convergence curves.

Output is byte-stable: no timestamps and a fixed id salt.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "archfit"
matplotlib.rcParams["svg.fonttype"] = "none"


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def score_heatmaps(rows, path, metrics=("dice", "iou", "hd", "chamfer")):
    """One panel per metric: iterations down, candidate stations across."""
    its = sorted({int(r["iteration"]) for r in rows})
    cands = sorted({int(r["candidate"]) for r in rows})
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.6))
    for ax, m in zip(np.atleast_1d(axes), metrics):
        M = np.full((len(its), len(cands)), np.nan)
        for r in rows:
            M[its.index(int(r["iteration"])), cands.index(int(r["candidate"]))] = float(r[m])
        im = ax.imshow(M, cmap="viridis_r" if m in ("hd", "chamfer") else "viridis",
                       aspect="auto")
        ax.set_xticks(range(len(cands)), [str(c) for c in cands])
        ax.set_yticks(range(len(its)), [str(int(i) + 2) for i in its])
        ax.set_xlabel("station")
        ax.set_ylabel("slices")
        ax.set_title(m)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    return _save(fig, path)


def radius_profiles(profiles: dict, path):
    """``profiles`` maps a label (e.g. slice count) to (arclengths, relative errors)."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for label, (s, e) in profiles.items():
        ax.plot(s, e, marker="o", ms=3, label=str(label))
    ax.axhline(0.0, color="0.5", lw=0.8)
    ax.set_xlabel("arclength (mm)")
    ax.set_ylabel("relative radius error")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, path)


def convergence(rows, path):
    fig, ax = plt.subplots(figsize=(6, 3.6))
    frames = sorted({int(r["frame"]) for r in rows})
    for f in frames[:1]:
        sub = [r for r in rows if int(r["frame"]) == f]
        ep = [int(r["epoch"]) for r in sub]
        for key in ("total", "mesh", "centerline"):
            ax.semilogy(ep, [float(r[key]) for r in sub], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
