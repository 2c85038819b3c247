"""Figure rendering for benchmark reports and reconstructed images.

Every report path that writes a delimited file can also render the
matching matplotlib figure next to it: stage-time bars for the pipeline
bench, utilization-vs-order curves for the decode bench, and a
millimeter-axis B-scan for reconstructions.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .decode import DecodeBenchRow
from .io import DisplaySettings, display_transform
from .model import BeamformParams, ImageFrame


def save_stage_bars(
    stage_ns: dict, path: Union[str, Path], title: str = "per-stage time"
) -> None:
    """Horizontal bars of per-stage nanoseconds (32-frame means upstream)."""
    stages = list(stage_ns.keys())
    values = [stage_ns[s] / 1e6 for s in stages]
    fig, ax = plt.subplots(figsize=(6, 0.6 * max(len(stages), 2) + 1))
    ax.barh(stages, values, color="#4878d0")
    ax.set_xlabel("time per frame (ms)")
    ax.set_title(title)
    for i, v in enumerate(values):
        ax.text(v, i, f" {v:.2f}", va="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_decode_plot(rows: Sequence[DecodeBenchRow], path: Union[str, Path]) -> None:
    """Fraction-of-peak vs transmit count, square and sparse cases."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode, marker in (("square", "o"), ("sparse", "s")):
        sel = [r for r in rows if r.mode == mode]
        if not sel:
            continue
        ax.plot(
            [r.order for r in sel],
            [r.fraction_of_peak for r in sel],
            marker=marker,
            label=mode,
        )
    ax.set_xscale("log", base=2)
    ax.set_xlabel("hadamard order (transmits)")
    ax.set_ylabel("fraction of measured peak FLOPS")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_image_figure(
    image: ImageFrame,
    params: BeamformParams,
    settings: DisplaySettings,
    path: Union[str, Path],
    title: Optional[str] = None,
) -> None:
    """Aspect-correct grayscale B-scan with millimeter axes."""
    grid = display_transform(image, settings)
    nx, ny, nz = grid.shape
    # pick the largest 2D slice for display
    if ny == 1:
        img = grid[:, 0, :].T
        extent = [
            params.region_min[0] * 1e3,
            params.region_max[0] * 1e3,
            params.region_max[2] * 1e3,
            params.region_min[2] * 1e3,
        ]
        xlabel, ylabel = "x (mm)", "z (mm)"
    else:
        img = grid[:, :, nz // 2].T
        extent = [
            params.region_min[0] * 1e3,
            params.region_max[0] * 1e3,
            params.region_max[1] * 1e3,
            params.region_min[1] * 1e3,
        ]
        xlabel, ylabel = "x (mm)", "y (mm)"
    fig, ax = plt.subplots(figsize=(5, 5))
    im = ax.imshow(img, cmap="gray", extent=extent, aspect="equal", vmin=0, vmax=255)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    label = (
        f"log {settings.dynamic_range_db:.0f} dB"
        if settings.kind == "log"
        else f"power thr {settings.power_threshold:.2f}"
    )
    fig.colorbar(im, ax=ax, label=label, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
