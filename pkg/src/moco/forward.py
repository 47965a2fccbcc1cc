"""Linear forward operators with exact discrete adjoints.

All operators act on plain arrays: images of shape ``image_grid.dims`` and
detector data of shape ``detector_shape``.  The stacked motion-corrected
operator maps a reference image to one detector array per gate.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .deform import push_matrix
from .grid import Deformation, Grid

__all__ = [
    "ForwardOperator",
    "IdentityOperator",
    "GaussianBlur",
    "ParallelProjector",
    "ProlongedOperator",
    "StackedOperator",
    "stacked_motion_operator",
    "build_operator",
]


class ForwardOperator:
    """Base class; subclasses implement ``_apply`` and ``_adjoint``."""

    kind = "abstract"

    def __init__(self, image_grid: Grid, detector_shape):
        self.image_grid = image_grid
        self.detector_shape = tuple(int(s) for s in detector_shape)
        self._sens = None

    def apply(self, u) -> np.ndarray:
        u = np.asarray(getattr(u, "values", u), dtype=float)
        if u.shape != self.image_grid.dims:
            raise ValueError(f"image shape {u.shape} != {self.image_grid.dims}")
        return self._apply(u)

    def adjoint(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != self.detector_shape:
            raise ValueError(f"detector shape {v.shape} != {self.detector_shape}")
        return self._adjoint(v)

    def sensitivity(self) -> np.ndarray:
        """``K^T 1``, cached."""
        if self._sens is None:
            self._sens = self.adjoint(np.ones(self.detector_shape))
        return self._sens

    def _apply(self, u):
        raise NotImplementedError

    def _adjoint(self, v):
        raise NotImplementedError


class IdentityOperator(ForwardOperator):
    kind = "identity"

    def __init__(self, grid: Grid):
        super().__init__(grid, grid.dims)

    def _apply(self, u):
        return u.copy()

    def _adjoint(self, v):
        return v.copy()


class GaussianBlur(ForwardOperator):
    """Separable Gaussian blur with zero padding.

    ``sigma`` is in length units.  The kernel is truncated at 4 sigma and
    renormalized to unit sum, so interior constants are preserved.
    """

    kind = "gaussian_blur"

    def __init__(self, grid: Grid, sigma: float):
        super().__init__(grid, grid.dims)
        if sigma < 0:
            raise ValueError("sigma must be nonnegative")
        self.sigma = float(sigma)
        self.kernels = []
        for h in grid.spacing:
            s = self.sigma / h
            radius = int(np.ceil(4 * s))
            if radius == 0:
                self.kernels.append(np.ones(1))
                continue
            t = np.arange(-radius, radius + 1)
            k = np.exp(-0.5 * (t / s) ** 2)
            k[np.abs(t) > 4 * s] = 0.0
            self.kernels.append(k / k.sum())

    def _apply(self, u):
        for axis, k in enumerate(self.kernels):
            u = ndimage.convolve1d(u, k, axis=axis, mode="constant", cval=0.0)
        return u

    def _adjoint(self, v):
        # symmetric odd kernels: correlation equals convolution
        for axis, k in enumerate(self.kernels):
            v = ndimage.correlate1d(v, k, axis=axis, mode="constant", cval=0.0)
        return v


class ParallelProjector(ForwardOperator):
    """2D parallel-beam projector assembled as a sparse matrix.

    Each cell is split into ``subsamples**2`` points whose detector
    coordinate is shared linearly between the two nearest bins.  Values are
    line integrals (mass per unit detector length), and for every angle the
    detector profile integrates to the image mass.  The detector covers the
    box diagonal plus one bin on each side.
    """

    kind = "parallel_projector"

    def __init__(self, grid: Grid, n_angles: int, n_bins: int, subsamples: int = 3):
        if grid.ndim != 2:
            raise ValueError("parallel projector is 2D only")
        if n_angles < 1 or n_bins < 3:
            raise ValueError("need n_angles >= 1 and n_bins >= 3")
        super().__init__(grid, (n_angles, n_bins))
        self.n_angles = int(n_angles)
        self.n_bins = int(n_bins)
        self.angles = np.arange(n_angles) * np.pi / n_angles
        lower = np.asarray(grid.origin)
        upper = np.asarray(grid.upper)
        center = 0.5 * (lower + upper)
        diag = float(np.linalg.norm(upper - lower))
        self.bin_width = diag / (n_bins - 2)
        s0 = -0.5 * n_bins * self.bin_width

        # subsample offsets within a cell, in units of spacing
        off = (np.arange(subsamples) + 0.5) / subsamples - 0.5
        ox, oy = np.meshgrid(off, off, indexing="ij")
        cc = grid.cell_centers().reshape(2, -1)
        px = (cc[0][:, None] + ox.ravel()[None] * grid.spacing[0]).ravel() - center[0]
        py = (cc[1][:, None] + oy.ravel()[None] * grid.spacing[1]).ravel() - center[1]
        cell = np.repeat(np.arange(grid.n_cells), subsamples**2)
        w_pt = grid.cell_volume / subsamples**2 / self.bin_width

        rows, cols, vals = [], [], []
        for k, theta in enumerate(self.angles):
            s = px * np.cos(theta) + py * np.sin(theta)
            t = (s - s0) / self.bin_width - 0.5
            b0 = np.floor(t).astype(np.int64)
            frac = t - b0
            for b, w in ((b0, 1.0 - frac), (b0 + 1, frac)):
                ok = (b >= 0) & (b < n_bins)
                rows.append(k * n_bins + b[ok])
                cols.append(cell[ok])
                vals.append(w[ok] * w_pt)
        A = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_angles * n_bins, grid.n_cells),
        )
        self.matrix = A.tocsr()
        self.matrix.sum_duplicates()
        self._matrix_t = self.matrix.T.tocsr()

    def _apply(self, u):
        return (self.matrix @ u.ravel()).reshape(self.detector_shape)

    def _adjoint(self, v):
        return (self._matrix_t @ v.ravel()).reshape(self.image_grid.dims)


class ProlongedOperator(ForwardOperator):
    """``K`` composed with piecewise-constant upsampling from a coarse grid."""

    kind = "prolonged"

    def __init__(self, base: ForwardOperator, factor: int):
        coarse = base.image_grid.coarsen(factor)
        super().__init__(coarse, base.detector_shape)
        self.base = base
        self.factor = int(factor)

    def _apply(self, u):
        for axis in range(u.ndim):
            u = np.repeat(u, self.factor, axis=axis)
        return self.base._apply(u)

    def _adjoint(self, v):
        w = self.base._adjoint(v)
        f = self.factor
        shape = []
        for m in self.image_grid.dims:
            shape += [m, f]
        w = w.reshape(shape)
        return w.sum(axis=tuple(range(1, w.ndim, 2)))


class StackedOperator:
    """``u -> (K T_0 u, ..., K T_N u)`` for mass-preserving transports ``T_i``."""

    def __init__(self, base: ForwardOperator, deformations):
        deformations = list(deformations)
        if not deformations:
            raise ValueError("stacked operator needs at least one gate")
        self.base = base
        self.image_grid = base.image_grid
        self.deformations = deformations
        self.transports = [push_matrix(base.image_grid, y) for y in deformations]
        self._transports_t = [T.T.tocsr() for T in self.transports]
        self.detector_shape = (len(deformations),) + base.detector_shape
        self._sens = None

    @property
    def n_gates(self) -> int:
        return len(self.transports)

    def apply(self, u) -> np.ndarray:
        u = np.asarray(getattr(u, "values", u), dtype=float)
        if u.shape != self.image_grid.dims:
            raise ValueError(f"image shape {u.shape} != {self.image_grid.dims}")
        flat = u.ravel()
        dims = self.image_grid.dims
        return np.stack([self.base._apply((T @ flat).reshape(dims)) for T in self.transports])

    def adjoint(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != self.detector_shape:
            raise ValueError(f"detector shape {v.shape} != {self.detector_shape}")
        out = np.zeros(self.image_grid.n_cells)
        for Tt, vi in zip(self._transports_t, v):
            out += Tt @ self.base._adjoint(vi).ravel()
        return out.reshape(self.image_grid.dims)

    def sensitivity(self) -> np.ndarray:
        if self._sens is None:
            self._sens = self.adjoint(np.ones(self.detector_shape))
        return self._sens


def stacked_motion_operator(K: ForwardOperator, deformations: list[Deformation]) -> StackedOperator:
    return StackedOperator(K, deformations)


def build_operator(grid: Grid, kind: str, sigma: float = 0.0, n_angles: int = 0, n_bins: int = 0):
    """Construct an operator by name (``blur``, ``projector`` or ``identity``)."""
    if kind in ("blur", "gaussian_blur"):
        return GaussianBlur(grid, sigma)
    if kind in ("projector", "parallel_projector"):
        return ParallelProjector(grid, n_angles or 3 * max(grid.dims) // 2, n_bins or int(1.5 * max(grid.dims)) + 2)
    if kind == "identity":
        return IdentityOperator(grid)
    raise ValueError(f"unknown operator kind {kind!r}")
