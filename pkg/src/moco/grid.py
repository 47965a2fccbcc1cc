"""Regular grids, multilinear interpolation and nodal deformation geometry.

Images live on cell centers, deformations on cell corners (nodes).  A grid
with ``dims = (m1, ..., md)`` carries ``prod(m)`` image values and
``d * prod(m + 1)`` deformation unknowns stored component-first with shape
``(d, m1 + 1, ..., md + 1)``.

Per-cell Jacobians of a nodal deformation are the gradient of its
multilinear interpolant at the cell center, i.e. forward differences along
one axis averaged over the remaining axes.  This is exact for affine maps.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Grid",
    "DensityImage",
    "Deformation",
    "CellTensorField",
    "interp",
    "nodal_jacobian",
    "det_field",
    "cof_field",
    "identity_deformation",
    "write_moco",
    "read_moco",
    "save_image",
    "load_image",
    "save_deformation",
    "load_deformation",
]

# fractional index offsets closer than this to an integer are snapped, so the
# identity deformation reproduces images bit-exactly
_SNAP = 1e-12


@dataclass(frozen=True)
class Grid:
    dims: tuple[int, ...]
    spacing: tuple[float, ...]
    origin: tuple[float, ...] = None

    def __post_init__(self):
        dims = tuple(int(m) for m in self.dims)
        d = len(dims)
        spacing = self.spacing
        if np.isscalar(spacing):
            spacing = (spacing,) * d
        spacing = tuple(float(h) for h in spacing)
        origin = self.origin
        if origin is None:
            origin = (0.0,) * d
        elif np.isscalar(origin):
            origin = (origin,) * d
        origin = tuple(float(o) for o in origin)
        if d not in (1, 2, 3):
            raise ValueError(f"grid dimension must be 1, 2 or 3, got {d}")
        if len(spacing) != d or len(origin) != d:
            raise ValueError("dims, spacing and origin must have equal length")
        if min(dims) < 2:
            raise ValueError(f"all dims must be >= 2, got {dims}")
        if min(spacing) <= 0:
            raise ValueError(f"all spacings must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def box(cls, dims, lower=-1.0, upper=1.0):
        """Grid of ``dims`` cells covering ``[lower, upper]`` on every axis."""
        dims = tuple(int(m) for m in dims)
        lower = np.broadcast_to(np.asarray(lower, float), (len(dims),))
        upper = np.broadcast_to(np.asarray(upper, float), (len(dims),))
        spacing = tuple((upper - lower) / np.asarray(dims))
        return cls(dims, spacing, tuple(lower))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))

    @property
    def node_shape(self) -> tuple[int, ...]:
        return tuple(m + 1 for m in self.dims)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def upper(self) -> tuple[float, ...]:
        return tuple(o + m * h for o, m, h in zip(self.origin, self.dims, self.spacing))

    def axes(self, kind: str = "cell") -> list[np.ndarray]:
        out = []
        for o, m, h in zip(self.origin, self.dims, self.spacing):
            if kind == "cell":
                out.append(o + (np.arange(m) + 0.5) * h)
            else:
                out.append(o + np.arange(m + 1) * h)
        return out

    def cell_centers(self) -> np.ndarray:
        """Cell-center coordinates, shape ``(d, *dims)``."""
        return np.stack(np.meshgrid(*self.axes("cell"), indexing="ij"))

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(d, *node_shape)``."""
        return np.stack(np.meshgrid(*self.axes("node"), indexing="ij"))

    def coarsen(self, factor: int = 2) -> "Grid":
        if any(m % factor for m in self.dims):
            raise ValueError(f"dims {self.dims} not divisible by {factor}")
        return Grid(
            tuple(m // factor for m in self.dims),
            tuple(h * factor for h in self.spacing),
            self.origin,
        )


@dataclass
class DensityImage:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.dims:
            raise ValueError(f"values shape {self.values.shape} != grid dims {self.grid.dims}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("image values must be finite")
        if np.any(self.values < 0):
            raise ValueError("density values must be nonnegative")

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)


@dataclass
class Deformation:
    grid: Grid
    nodal_values: np.ndarray

    def __post_init__(self):
        self.nodal_values = np.asarray(self.nodal_values, dtype=float)
        expected = (self.grid.ndim,) + self.grid.node_shape
        if self.nodal_values.shape != expected:
            raise ValueError(f"nodal values shape {self.nodal_values.shape} != {expected}")
        if not np.all(np.isfinite(self.nodal_values)):
            raise ValueError("deformation values must be finite")

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "Deformation":
        """Sample ``fn(x) -> y`` (both shaped ``(d, ...)``) on the nodes."""
        return cls(grid, np.asarray(fn(grid.nodes()), dtype=float))

    def displacement(self) -> np.ndarray:
        return self.nodal_values - self.grid.nodes()

    def cell_centers(self) -> np.ndarray:
        """``y`` at cell centers, shape ``(d, *dims)``."""
        return np.stack([cell_average(c) for c in self.nodal_values])

    def boundary_mask(self) -> np.ndarray:
        """Boolean mask over nodes, True on the outer boundary."""
        mask = np.zeros(self.grid.node_shape, dtype=bool)
        for axis in range(self.grid.ndim):
            idx = [slice(None)] * self.grid.ndim
            idx[axis] = 0
            mask[tuple(idx)] = True
            idx[axis] = -1
            mask[tuple(idx)] = True
        return mask


def identity_deformation(grid: Grid) -> Deformation:
    return Deformation(grid, grid.nodes())


@dataclass
class CellTensorField:
    """One ``d x d`` matrix per cell; ``values[..., k, a] = dy_k / dx_a``."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = self.grid.ndim
        if self.values.shape != self.grid.dims + (d, d):
            raise ValueError("tensor field shape does not match grid")


# ---------------------------------------------------------------------------
# interpolation


def interp_stencil(grid: Grid, points: np.ndarray, with_derivative: bool = False):
    """Multilinear interpolation stencil at ``points`` of shape ``(d, n)``.

    Returns ``(index, weight)`` arrays of shape ``(2**d, n)`` holding flat cell
    indices and weights, plus ``dweight`` of shape ``(d, 2**d, n)`` when
    requested.  Corners outside the grid act as zero-valued ghost cells and
    points outside the bounding box get all-zero weights.
    """
    points = np.asarray(points, dtype=float)
    d = grid.ndim
    if points.shape[0] != d:
        raise ValueError(f"points must have leading dimension {d}")
    bad = ~np.all(np.isfinite(points), axis=0)
    if np.any(bad):
        raise ValueError(f"non-finite interpolation point at index {int(np.flatnonzero(bad)[0])}")
    n = points.shape[1]
    origin = np.asarray(grid.origin)[:, None]
    spacing = np.asarray(grid.spacing)[:, None]
    dims = np.asarray(grid.dims)[:, None]

    t = (points - origin) / spacing - 0.5
    r = np.rint(t)
    t = np.where(np.abs(t - r) < _SNAP, r, t)
    inside = np.all((t >= -0.5) & (t <= dims - 0.5), axis=0)
    i0 = np.floor(t).astype(np.int64)
    frac = t - i0

    n_corner = 2**d
    index = np.zeros((n_corner, n), dtype=np.int64)
    weight = np.zeros((n_corner, n))
    dweight = np.zeros((d, n_corner, n)) if with_derivative else None
    strides = np.cumprod((grid.dims[1:] + (1,))[::-1])[::-1]
    for c, bits in enumerate(itertools.product((0, 1), repeat=d)):
        bits = np.asarray(bits)[:, None]
        idx = i0 + bits
        valid = inside & np.all((idx >= 0) & (idx < dims), axis=0)
        factors = np.where(bits == 1, frac, 1.0 - frac)
        w = np.prod(factors, axis=0)
        weight[c] = np.where(valid, w, 0.0)
        index[c] = np.where(valid, (idx * strides[:, None]).sum(axis=0), 0)
        if with_derivative:
            sign = np.where(bits == 1, 1.0, -1.0)
            for a in range(d):
                others = np.prod(np.delete(factors, a, axis=0), axis=0) if d > 1 else 1.0
                dweight[a, c] = np.where(valid, sign[a] * others / grid.spacing[a], 0.0)
    return index, weight, dweight


def interp(img: DensityImage, points, with_derivative: bool = False):
    """Evaluate the multilinear interpolant of ``img`` at ``points``.

    ``points`` has shape ``(n, d)``.  Returns values of shape ``(n,)`` and,
    with ``with_derivative``, gradients of shape ``(n, d)``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    index, weight, dweight = interp_stencil(img.grid, pts.T, with_derivative)
    flat = img.values.ravel()
    vals = (weight * flat[index]).sum(axis=0)
    if not with_derivative:
        return vals
    grads = (dweight * flat[index][None]).sum(axis=1).T
    return vals, grads


# ---------------------------------------------------------------------------
# nodal differential geometry


def cell_average(v: np.ndarray) -> np.ndarray:
    """Average of the 2**d corner values of each cell."""
    for axis in range(v.ndim):
        v = _avg(v, axis)
    return v


def cell_average_adjoint(g: np.ndarray) -> np.ndarray:
    for axis in range(g.ndim):
        g = _avg_t(g, axis)
    return g


def _avg(v, axis):
    lo = [slice(None)] * v.ndim
    hi = [slice(None)] * v.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    return 0.5 * (v[tuple(lo)] + v[tuple(hi)])


def _avg_t(g, axis):
    shape = list(g.shape)
    shape[axis] += 1
    out = np.zeros(shape)
    lo = [slice(None)] * g.ndim
    hi = [slice(None)] * g.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    out[tuple(lo)] += 0.5 * g
    out[tuple(hi)] += 0.5 * g
    return out


def cell_derivative(v: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Derivative along ``axis`` of nodal scalar ``v``, sampled at cell centers."""
    lo = [slice(None)] * v.ndim
    hi = [slice(None)] * v.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    out = (v[tuple(hi)] - v[tuple(lo)]) / h
    for b in range(v.ndim):
        if b != axis:
            out = _avg(out, b)
    return out


def cell_derivative_adjoint(g: np.ndarray, axis: int, h: float) -> np.ndarray:
    for b in reversed(range(g.ndim)):
        if b != axis:
            g = _avg_t(g, b)
    shape = list(g.shape)
    shape[axis] += 1
    out = np.zeros(shape)
    lo = [slice(None)] * g.ndim
    hi = [slice(None)] * g.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    out[tuple(lo)] -= g / h
    out[tuple(hi)] += g / h
    return out


def nodal_jacobian(y: Deformation) -> CellTensorField:
    d = y.grid.ndim
    J = np.empty(y.grid.dims + (d, d))
    for k in range(d):
        for a in range(d):
            J[..., k, a] = cell_derivative(y.nodal_values[k], a, y.grid.spacing[a])
    return CellTensorField(y.grid, J)


def nodal_jacobian_adjoint(grid: Grid, G: np.ndarray) -> np.ndarray:
    """Transpose of :func:`nodal_jacobian` applied to a per-cell matrix field."""
    d = grid.ndim
    out = np.zeros((d,) + grid.node_shape)
    for k in range(d):
        for a in range(d):
            out[k] += cell_derivative_adjoint(G[..., k, a], a, grid.spacing[a])
    return out


def _det(J: np.ndarray) -> np.ndarray:
    d = J.shape[-1]
    if d == 1:
        return J[..., 0, 0].copy()
    if d == 2:
        return J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    return np.einsum("...i,...i->...", J[..., 0, :], np.cross(J[..., 1, :], J[..., 2, :]))


def _cof(J: np.ndarray) -> np.ndarray:
    d = J.shape[-1]
    C = np.empty_like(J)
    if d == 1:
        C[..., 0, 0] = 1.0
    elif d == 2:
        C[..., 0, 0] = J[..., 1, 1]
        C[..., 0, 1] = -J[..., 1, 0]
        C[..., 1, 0] = -J[..., 0, 1]
        C[..., 1, 1] = J[..., 0, 0]
    else:
        C[..., 0, :] = np.cross(J[..., 1, :], J[..., 2, :])
        C[..., 1, :] = np.cross(J[..., 2, :], J[..., 0, :])
        C[..., 2, :] = np.cross(J[..., 0, :], J[..., 1, :])
    return C


def det_field(J: CellTensorField) -> np.ndarray:
    """Per-cell determinant, shape ``grid.dims``."""
    return _det(J.values)


def cof_field(J: CellTensorField) -> CellTensorField:
    """Per-cell cofactor matrix, satisfying ``J cof(J)^T = det(J) I``."""
    return CellTensorField(J.grid, _cof(J.values))


# ---------------------------------------------------------------------------
# MOCO1 files: one text header line, then little-endian float64 data


def _header(grid: Grid) -> str:
    parts = ["MOCO1", str(grid.ndim)]
    parts += [str(m) for m in grid.dims]
    parts += [repr(float(h)) for h in grid.spacing]
    parts += [repr(float(o)) for o in grid.origin]
    return " ".join(parts) + "\n"


def write_moco(path, grid: Grid, array: np.ndarray) -> None:
    path = Path(path)
    data = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_header(grid).encode("ascii"))
        fh.write(data.tobytes())


def read_moco(path) -> tuple[Grid, np.ndarray]:
    """Read a MOCO1 file.

    The payload is returned as an image array (``dims``) when it holds one
    value per cell, and as interleaved nodal vectors ``(*node_shape, d)``
    when it holds ``d`` values per node.
    """
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing MOCO1 header")
    tokens = raw[:nl].decode("ascii").split()
    if not tokens or tokens[0] != "MOCO1":
        raise ValueError(f"{path}: not a MOCO1 file")
    try:
        d = int(tokens[1])
        dims = tuple(int(t) for t in tokens[2 : 2 + d])
        spacing = tuple(float(t) for t in tokens[2 + d : 2 + 2 * d])
        origin = tuple(float(t) for t in tokens[2 + 2 * d : 2 + 3 * d])
    except (IndexError, ValueError) as exc:
        raise ValueError(f"{path}: malformed MOCO1 header") from exc
    if len(tokens) != 2 + 3 * d:
        raise ValueError(f"{path}: malformed MOCO1 header")
    grid = Grid(dims, spacing, origin)
    data = np.frombuffer(raw[nl + 1 :], dtype="<f8").astype(float)
    if data.size == grid.n_cells:
        return grid, data.reshape(grid.dims)
    n_nodes = int(np.prod(grid.node_shape))
    if data.size == n_nodes * d:
        return grid, data.reshape(grid.node_shape + (d,))
    raise ValueError(f"{path}: payload of {data.size} values matches neither cells nor nodes")


def save_image(path, img: DensityImage) -> None:
    write_moco(path, img.grid, img.values)


def load_image(path) -> DensityImage:
    grid, arr = read_moco(path)
    if arr.shape != grid.dims:
        raise ValueError(f"{path}: file holds a deformation, not an image")
    return DensityImage(grid, arr)


def save_deformation(path, y: Deformation) -> None:
    write_moco(path, y.grid, np.moveaxis(y.nodal_values, 0, -1))


def load_deformation(path) -> Deformation:
    grid, arr = read_moco(path)
    if arr.shape == grid.dims:
        raise ValueError(f"{path}: file holds an image, not a deformation")
    return Deformation(grid, np.moveaxis(arr, -1, 0))
