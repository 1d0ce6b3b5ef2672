"""Report figures. Rendered off-screen with fixed metadata so reruns give identical PNGs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def slope_histogram_figure(path, histogram, edges) -> None:
    counts = np.asarray(histogram)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    centers = 0.5 * (edges[1:] + edges[:-1])
    ax.bar(centers, counts[1:-1], width=np.diff(edges), align="center", color="#4c72b0", edgecolor="white")
    ax.set_xlabel("scene slope")
    ax.set_ylabel("scenes")
    ax.set_title(f"slope histogram (under {counts[0]}, over {counts[-1]})")
    fig.tight_layout()
    _save(fig, path)


def lanes_per_image_figure(path, counts: dict) -> None:
    keys = sorted(int(k) for k in counts)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar([str(k) for k in keys], [counts[k] if k in counts else counts[str(k)] for k in keys], color="#55a868")
    ax.set_xlabel("lanes per image")
    ax.set_ylabel("frames")
    fig.tight_layout()
    _save(fig, path)


def cd_histogram_figure(path, cds, tau: float) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if len(cds):
        ax.hist(np.asarray(cds), bins=30, range=(0.0, max(tau, float(np.max(cds)))), color="#c44e52")
    ax.axvline(tau, color="k", linestyle="--", linewidth=1)
    ax.set_xlabel("unilateral chamfer distance of true positives (m)")
    ax.set_ylabel("lanes")
    fig.tight_layout()
    _save(fig, path)
