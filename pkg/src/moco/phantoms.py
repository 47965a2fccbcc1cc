"""Synthetic moving phantoms with analytic mass-preserving motion.

Gate images are evaluated exactly as ``rho0(y(x)) * det(grad y(x))`` at cell
centers from closed-form templates and radial deformations, so the motion
model holds up to sampling only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import DensityImage, Deformation, Grid

__all__ = ["PhantomTruth", "RadialMap", "make_ring_phantom", "make_cardiac_phantom", "disc"]


@dataclass
class PhantomTruth:
    images: list[DensityImage]
    deformations: list[Deformation]
    roi: np.ndarray | None = None  # optional low-activity region mask

    @property
    def template(self) -> DensityImage:
        return self.images[0]

    @property
    def n_gates(self) -> int:
        return len(self.images)


class RadialMap:
    """``y(x) = c + (x - c) * (1 + a * eta(|x - c| / rmax))`` with ``eta(s) = (1 - s^2)^2``.

    ``eta`` vanishes with its derivative at ``rmax``, so the map is the
    identity outside that radius.  ``a > 0`` samples the template further
    out and the imaged object shrinks.  The radial derivative is at least
    ``1 - 0.8 a`` (and ``1 + a`` for ``a < 0``), so ``-1 < a < 1.25`` keeps
    the map a diffeomorphism.
    """

    def __init__(self, a: float, center=(0.0, 0.0), rmax: float = 0.95):
        self.a = float(a)
        self.center = np.asarray(center, dtype=float)
        self.rmax = float(rmax)

    def _eta(self, r):
        s = np.minimum(r / self.rmax, 1.0)
        eta = (1.0 - s**2) ** 2
        deta = -4.0 * s * (1.0 - s**2) / self.rmax
        return eta, deta

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        c = self.center.reshape((-1,) + (1,) * (x.ndim - 1))
        u = x - c
        r = np.sqrt((u**2).sum(axis=0))
        eta, _ = self._eta(r)
        return c + u * (1.0 + self.a * eta)

    def det(self, x):
        x = np.asarray(x, dtype=float)
        c = self.center.reshape((-1,) + (1,) * (x.ndim - 1))
        r = np.sqrt(((x - c) ** 2).sum(axis=0))
        eta, deta = self._eta(r)
        scale = 1.0 + self.a * eta
        radial = 1.0 + self.a * (eta + r * deta)
        return scale ** (x.shape[0] - 1) * radial


def _smooth_annulus(r, r_in, r_out, width):
    return 0.5 * (np.tanh((r - r_in) / width) - np.tanh((r - r_out) / width))


def disc(grid: Grid, radius: float, center=None, value: float = 1.0) -> DensityImage:
    """Sharp disc sampled at cell centers."""
    x = grid.cell_centers()
    c = np.zeros(grid.ndim) if center is None else np.asarray(center, float)
    r = np.sqrt(((x - c.reshape((-1,) + (1,) * grid.ndim)) ** 2).sum(axis=0))
    return DensityImage(grid, value * (r < radius))


def _gate_images(grid, density, maps):
    x = grid.cell_centers()
    images, deformations = [], []
    for m in maps:
        images.append(DensityImage(grid, density(m(x)) * m.det(x)))
        deformations.append(Deformation.from_function(grid, m))
    return images, deformations


def make_ring_phantom(
    grid: Grid,
    stages: int = 3,
    shrink_rates=None,
    intensity: float = 1.0e4,
    radii=(0.35, 0.6),
    edge_width: float = 0.05,
    rmax: float = 0.95,
) -> PhantomTruth:
    """Ring template plus ``stages - 1`` progressively shrunk copies.

    ``shrink_rates[i]`` is the radial map amplitude of stage ``i``; stage 0
    must be 0 (the reference).  ``radii``, ``edge_width`` and ``rmax`` (the
    support radius of the motion) are fractions of the half box width.
    """
    if stages < 2:
        raise ValueError("need at least two stages")
    if shrink_rates is None:
        shrink_rates = np.linspace(0.0, 0.25, stages)
    shrink_rates = [float(a) for a in shrink_rates]
    if len(shrink_rates) != stages or shrink_rates[0] != 0.0:
        raise ValueError("shrink_rates needs one entry per stage, starting with 0")
    if grid.ndim != 2:
        raise ValueError("ring phantom is 2D")
    half = 0.5 * min(u - o for u, o in zip(grid.upper, grid.origin))
    center = tuple(0.5 * (u + o) for u, o in zip(grid.upper, grid.origin))
    maps = [RadialMap(a, center, rmax * half) for a in shrink_rates]
    if any(not -1.0 < m.a < 1.25 for m in maps):
        raise ValueError("shrink rate outside (-1, 1.25): the motion would fold")
    c = np.asarray(center).reshape(2, 1, 1)
    r_in, r_out = radii[0] * half, radii[1] * half

    def density(z):
        r = np.sqrt(((z - c) ** 2).sum(axis=0))
        return intensity * _smooth_annulus(r, r_in, r_out, edge_width * half)

    images, deformations = _gate_images(grid, density, maps)
    return PhantomTruth(images, deformations)


def make_cardiac_phantom(grid: Grid, gates: int = 4, intensity: float = 1.0e4, amplitude: float = 0.2) -> PhantomTruth:
    """Layered-ellipse heart-like phantom contracting periodically over ``gates``.

    Layers: a low-activity body ellipse, a bright left-ventricular wall
    around a cold blood pool, and a faint right-ventricular wall.  The
    contraction is a radial map centred on the left ventricle with amplitude
    ``amplitude * sin(pi * i / gates)**2``.  The returned ``roi`` marks the
    right-ventricular wall.
    """
    if grid.ndim != 2:
        raise ValueError("cardiac phantom is 2D")
    if gates < 1:
        raise ValueError("need at least one gate")
    half = 0.5 * min(u - o for u, o in zip(grid.upper, grid.origin))
    o = np.asarray([0.5 * (u + lo) for u, lo in zip(grid.upper, grid.origin)])
    lv = o + half * np.array([0.08, 0.05])
    rv = o + half * np.array([-0.28, 0.10])

    def ellipse(z, center, ax0, ax1):
        d = (z - center.reshape(2, 1, 1)) / np.array([ax0, ax1]).reshape(2, 1, 1) / half
        return np.sqrt((d**2).sum(axis=0))

    def soft_inside(rho):
        # rho is a normalized elliptic radius with the edge at 1
        return 0.5 * (1.0 - np.tanh((rho - 1.0) / 0.08))

    def density(z):
        body = soft_inside(ellipse(z, o, 0.85, 0.7))
        lv_outer = soft_inside(ellipse(z, lv, 0.36, 0.40))
        lv_inner = soft_inside(ellipse(z, lv, 0.20, 0.24))
        rv_outer = soft_inside(ellipse(z, rv, 0.26, 0.34))
        rv_inner = soft_inside(ellipse(z, rv, 0.17, 0.25))
        val = 0.10 * body
        val = val + 0.90 * (lv_outer - lv_inner)
        val = val - 0.08 * lv_inner
        val = val + 0.18 * np.clip(rv_outer - rv_inner - lv_outer, 0.0, None)
        return intensity * np.clip(val, 0.0, None)

    rmax = 0.9 * half
    maps = [RadialMap(amplitude * np.sin(np.pi * i / gates) ** 2, lv, rmax) for i in range(gates)]
    images, deformations = _gate_images(grid, density, maps)
    x = grid.cell_centers()
    rv_wall = (ellipse(x, rv, 0.26, 0.34) < 1.0) & (ellipse(x, rv, 0.17, 0.25) > 1.0) & (ellipse(x, lv, 0.36, 0.40) > 1.0)
    return PhantomTruth(images, deformations, roi=rv_wall)
