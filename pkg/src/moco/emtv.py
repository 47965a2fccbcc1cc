"""EM, forward-backward EM-TV and Bregman-EM-TV reconstruction.

``K`` is anything with ``apply``, ``adjoint``, ``sensitivity`` and an
``image_grid`` (a :class:`~moco.forward.ForwardOperator` or a stacked
motion-corrected operator).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .fidelity import EPS, kl, tv, weighted_rof

__all__ = ["EmtvOptions", "em_step", "initial_image", "emtv_reconstruct", "bregman_emtv", "write_log"]

log = logging.getLogger(__name__)


@dataclass
class EmtvOptions:
    alpha: float = 0.0
    outer_iters: int = 50
    bregman_iters: int = 1
    rof_tol: float = 1e-3  # relative duality gap
    rof_max_iter: int = 1000
    positivity_floor: float = 1e-8  # relative to the mean of the start image

    def __post_init__(self):
        if self.outer_iters < 1 or self.bregman_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


def em_step(u: np.ndarray, K, f: np.ndarray) -> np.ndarray:
    """One multiplicative EM update ``u / K^T 1 * K^T (f / K u)``."""
    u = np.asarray(getattr(u, "values", u), dtype=float)
    if not np.any(u > 0):
        raise ValueError("EM step needs a nonzero image")
    sens = K.sensitivity()
    ratio = f / (K.apply(u) + EPS)
    back = K.adjoint(ratio)
    out = np.zeros_like(u)
    seen = sens > 0
    out[seen] = u[seen] / sens[seen] * back[seen]
    return out


def initial_image(K, f) -> np.ndarray:
    """Constant image whose forward projection carries the data's total mass."""
    grid = K.image_grid
    ones = np.ones(grid.dims)
    total = float(np.sum(K.apply(ones)))
    return ones * (float(np.sum(f)) / total)


def _objective_row(K, f, u, alpha, spacing, k):
    kl_val = kl(K.apply(u), f, with_gradient=False).value
    tv_val = tv(u, spacing)
    return {"iteration": k, "KL": kl_val, "TV": tv_val, "objective": kl_val + alpha * tv_val}


def _emtv_loop(K, f, opts, u, shift, trace):
    spacing = K.image_grid.spacing
    sens = K.sensitivity()
    seen = sens > 0
    floor = opts.positivity_floor * float(np.mean(u))
    # zeros are fixed points of the multiplicative update
    u = np.where(seen, np.maximum(u, floor), 0.0)
    for k in range(opts.outer_iters):
        half = em_step(u, K, f)
        if opts.alpha == 0:
            u = half
        else:
            u_safe = np.maximum(u, floor)
            w = np.where(seen, sens, 1.0) / u_safe
            target = half
            if shift is not None:
                target = half + shift / w
            u = weighted_rof(target, w, opts.alpha, spacing, opts.rof_tol, opts.rof_max_iter)
            u[~seen] = 0.0
        if trace is not None:
            trace.append(_objective_row(K, f, u, opts.alpha, spacing, len(trace) + 1))
    return u


def emtv_reconstruct(K, f, opts: EmtvOptions, u0=None, trace: list | None = None) -> np.ndarray:
    """FB-EM-TV: alternate an EM step and a weighted TV denoising step.

    Starts from :func:`initial_image` unless ``u0`` is given.  With
    ``alpha == 0`` this is plain EM.  Per-iteration KL/TV/objective rows are
    appended to ``trace`` if supplied.
    """
    f = np.asarray(f, dtype=float)
    if np.any(f < 0):
        raise ValueError("data must be nonnegative")
    u = initial_image(K, f) if u0 is None else np.asarray(u0, dtype=float).copy()
    return _emtv_loop(K, f, opts, u, None, trace)


def bregman_emtv(K, f, opts: EmtvOptions, u0=None, trace: list | None = None, iterates: list | None = None):
    """Bregman-EM-TV contrast enhancement.

    Each outer pass reruns EM-TV (warm-started) with TV replaced by its
    Bregman distance to the previous result; the accumulated subgradient
    ``v`` (already scaled by alpha) enters as a shift of the denoising target.
    ``iterates`` collects the result of each Bregman pass.
    """
    f = np.asarray(f, dtype=float)
    if np.any(f < 0):
        raise ValueError("data must be nonnegative")
    u = initial_image(K, f) if u0 is None else np.asarray(u0, dtype=float).copy()
    sens = K.sensitivity()
    v = np.zeros(K.image_grid.dims)
    for b in range(opts.bregman_iters):
        u = _emtv_loop(K, f, opts, u, v if b else None, trace)
        if iterates is not None:
            iterates.append(u.copy())
        if b + 1 < opts.bregman_iters:
            v = v - (sens - K.adjoint(f / (K.apply(u) + EPS)))
            log.debug("bregman pass %d done", b + 1)
    return u


def write_log(path, trace: list[dict]) -> None:
    """Write an EM-TV iteration trace as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "KL", "TV", "objective"])
        writer.writeheader()
        for row in trace:
            writer.writerow(row)
