"""Mass-preserving image transport and injectivity diagnostics.

The transformed image is ``rho(x) = rho0(y(x)) * det(grad y(x))`` evaluated at
cell centers.  For a fixed deformation this is linear in ``rho0``; the
assembled sparse matrix is what the motion-corrected forward operator uses,
so its transpose is exact.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .grid import (
    DensityImage,
    Deformation,
    Grid,
    cell_average_adjoint,
    det_field,
    interp_stencil,
    nodal_jacobian,
    nodal_jacobian_adjoint,
    _cof,
)

__all__ = [
    "IndicatrixField",
    "InvertibilityReport",
    "push_matrix",
    "push_mass_preserving",
    "push_vjp",
    "banach_indicatrix",
    "invertibility_report",
    "mass_error",
]


def _check_grids(rho_grid: Grid, y: Deformation) -> None:
    if rho_grid != y.grid:
        raise ValueError(f"image grid {rho_grid} and deformation grid {y.grid} differ")


def push_matrix(grid: Grid, y: Deformation) -> sp.csr_matrix:
    """Sparse matrix ``T`` with ``T @ rho0.ravel()`` the transported image."""
    _check_grids(grid, y)
    det = det_field(nodal_jacobian(y)).ravel()
    pts = y.cell_centers().reshape(grid.ndim, -1)
    index, weight, _ = interp_stencil(grid, pts)
    n = grid.n_cells
    rows = np.broadcast_to(np.arange(n), index.shape)
    vals = weight * det[None, :]
    T = sp.csr_matrix((vals.ravel(), (rows.ravel(), index.ravel())), shape=(n, n))
    T.eliminate_zeros()
    return T


def push_mass_preserving(rho0: DensityImage, y: Deformation, return_clamped: bool = False):
    """Transport ``rho0`` by ``y`` preserving mass.

    Negative values (cells with ``det <= 0``) are clamped to zero; pass
    ``return_clamped`` to also get the number of clamped cells.
    """
    T = push_matrix(rho0.grid, y)
    vals = (T @ rho0.values.ravel()).reshape(rho0.grid.dims)
    neg = vals < 0
    n_clamped = int(neg.sum())
    vals[neg] = 0.0
    out = DensityImage(rho0.grid, vals)
    if return_clamped:
        return out, n_clamped
    return out


def push_vjp(rho0: np.ndarray, y: Deformation, g: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. nodal values of ``<g, T(y) rho0>``.

    Product rule through ``interp(rho0, center(y)) * det(grad y)``: the first
    factor moves with the averaged corner positions, the second with the
    nodal Jacobian via the cofactor.
    """
    grid = y.grid
    d = grid.ndim
    pts = y.cell_centers().reshape(d, -1)
    index, weight, dweight = interp_stencil(grid, pts, with_derivative=True)
    flat = np.asarray(rho0, dtype=float).ravel()
    vals = (weight * flat[index]).sum(axis=0)
    dvals = (dweight * flat[index][None]).sum(axis=1)
    J = nodal_jacobian(y).values
    det = det_field(nodal_jacobian(y)).ravel()
    g = np.asarray(g, dtype=float).ravel()

    out = np.empty((d,) + grid.node_shape)
    for a in range(d):
        out[a] = cell_average_adjoint((g * det * dvals[a]).reshape(grid.dims))
    G = (g * vals).reshape(grid.dims)[..., None, None] * _cof(J)
    out += nodal_jacobian_adjoint(grid, G)
    return out


@dataclass
class IndicatrixField:
    grid: Grid
    counts: np.ndarray


@dataclass
class InvertibilityReport:
    max_count: int
    fraction_multi: float
    min_det: float
    fraction_nonpos_det: float


def banach_indicatrix(y: Deformation, target: Grid | None = None) -> IndicatrixField:
    """Approximate preimage counts by forward-mapping source cell centers.

    Every source cell center ``x`` is located in the target cell containing
    ``y(x)``; points landing outside the target are dropped.  Hits from
    source cells that touch each other (including diagonally) belong to the
    same preimage sheet and count once, so plain contraction does not
    register as a fold.
    """
    target = target or y.grid
    if target.ndim != y.grid.ndim:
        raise ValueError("target grid dimension differs from deformation")
    src = y.grid
    pts = y.cell_centers().reshape(src.ndim, -1)
    origin = np.asarray(target.origin)[:, None]
    spacing = np.asarray(target.spacing)[:, None]
    dims = np.asarray(target.dims)[:, None]
    idx = np.floor((pts - origin) / spacing).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < dims), axis=0)
    tgt = np.full(src.n_cells, -1, dtype=np.int64)
    tgt[ok] = np.ravel_multi_index(tuple(idx[:, ok]), target.dims)

    # link neighbouring source cells that share a target cell
    tgt_img = tgt.reshape(src.dims)
    lin = np.arange(src.n_cells).reshape(src.dims)
    rows, cols = [], []
    for offset in itertools.product((-1, 0, 1), repeat=src.ndim):
        if offset <= (0,) * src.ndim:
            continue
        a_sl, b_sl = [], []
        for o, m in zip(offset, src.dims):
            a_sl.append(slice(max(0, -o), m - max(0, o)))
            b_sl.append(slice(max(0, o), m - max(0, -o)))
        ta, tb = tgt_img[tuple(a_sl)], tgt_img[tuple(b_sl)]
        same = (ta == tb) & (ta >= 0)
        rows.append(lin[tuple(a_sl)][same])
        cols.append(lin[tuple(b_sl)][same])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    adj = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(src.n_cells,) * 2)
    _, label = connected_components(adj, directed=False)

    pairs = np.unique(np.stack([tgt[ok], label[ok]]), axis=1)
    counts = np.bincount(pairs[0], minlength=target.n_cells).reshape(target.dims)
    return IndicatrixField(target, counts)


def invertibility_report(y: Deformation) -> InvertibilityReport:
    counts = banach_indicatrix(y, y.grid).counts
    det = det_field(nodal_jacobian(y))
    return InvertibilityReport(
        max_count=int(counts.max()),
        fraction_multi=float(np.mean(counts > 1)),
        min_det=float(det.min()),
        fraction_nonpos_det=float(np.mean(det <= 0)),
    )


def mass_error(rho0: DensityImage, y: Deformation) -> float:
    """Relative change of total mass under :func:`push_mass_preserving`."""
    m0 = rho0.mass
    if m0 == 0:
        raise ValueError("template has zero mass")
    return abs(push_mass_preserving(rho0, y).mass - m0) / m0
