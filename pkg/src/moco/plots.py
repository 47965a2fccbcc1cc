"""Figure and preview output: matplotlib PNGs and 8-bit PGM previews."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["write_pgm", "plot_images", "plot_metrics", "plot_convergence", "plot_deformation"]


def write_pgm(path, values: np.ndarray) -> tuple[float, float]:
    """Write a binary 8-bit PGM with linear min-max scaling.

    The (min, max) used for scaling goes to ``<path>.txt`` and is returned.
    Axis 0 runs along image columns so the picture is upright for ``x1`` right,
    ``x2`` up.
    """
    a = np.asarray(values, dtype=float)
    if a.ndim != 2:
        raise ValueError("PGM previews need a 2D array")
    lo, hi = float(a.min()), float(a.max())
    span = hi - lo
    scaled = np.zeros_like(a) if span <= 0 else (a - lo) / span
    img = np.round(255.0 * scaled).astype(np.uint8).T[::-1]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    Path(str(path) + ".txt").write_text(f"min = {lo!r}\nmax = {hi!r}\n")
    return lo, hi


def _show(ax, img, title, vmax=None):
    ax.imshow(np.asarray(img).T, origin="lower", cmap="gray", vmin=0.0, vmax=vmax)
    ax.set_title(title, fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])


def plot_images(path, images: dict, vmax=None) -> None:
    """Side by side grayscale panels (shared intensity scale)."""
    n = len(images)
    if vmax is None:
        vmax = max(float(np.max(v)) for v in images.values())
    cols = min(n, 5)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.4 * cols, 2.5 * rows), squeeze=False)
    for ax in axes.ravel()[n:]:
        ax.axis("off")
    for ax, (name, img) in zip(axes.ravel(), images.items()):
        _show(ax, img, name, vmax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metrics(path, records: dict) -> None:
    """Bar charts of reconstruction and phantom matching errors per method."""
    names = list(records)
    recon = [records[k].recon_error for k in names]
    pme = [records[k].phantom_matching_error for k in names]
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(8, 3))
    a0.bar(names, recon, color="0.4")
    a0.set_ylabel("relative L2 error")
    a0.set_title("reconstruction error", fontsize=10)
    keep = [(n, v) for n, v in zip(names, pme) if math.isfinite(v)]
    if keep:
        vals = [v for _, v in keep]
        a1.bar([n for n, _ in keep], vals, color="0.4")
        a1.set_yscale("log")
        a1.set_ylim(bottom=0.3 * min(vals))
    a1.set_title("phantom matching error", fontsize=10)
    for ax in (a0, a1):
        ax.tick_params(axis="x", labelsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_convergence(path, trace: list[dict], key: str = "J", xkey: str | None = None) -> None:
    """Objective versus step (half-steps of the alternation, or iterations)."""
    vals = [row[key] for row in trace]
    xs = [row[xkey] for row in trace] if xkey else list(range(len(vals)))
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(xs, vals, "o-", ms=3, color="k")
    ax.set_xlabel(xkey or "half-step")
    ax.set_ylabel(key)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_deformation(path, y, background=None, stride: int = 2) -> None:
    """Deformed nodal grid lines over an optional image."""
    v = y.nodal_values
    fig, ax = plt.subplots(figsize=(4, 4))
    if background is not None:
        lo, hi = y.grid.origin, y.grid.upper
        ax.imshow(np.asarray(background).T, origin="lower", cmap="gray",
                  extent=(lo[0], hi[0], lo[1], hi[1]))
    for i in range(0, v.shape[1], stride):
        ax.plot(v[0, i, :], v[1, i, :], "r-", lw=0.5)
    for j in range(0, v.shape[2], stride):
        ax.plot(v[0, :, j], v[1, :, j], "r-", lw=0.5)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
