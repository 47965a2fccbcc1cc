"""Motion step: register a template to one gate's detector data.

The objective is ``KL(K T(y) rho0, f) + beta * S_hyper(y)`` over nodal
deformations ``y``.  It is minimized by limited-memory BFGS with a cautious
update and a weak-Wolfe line search that treats folded trial points
(``det <= 0`` in some cell) as infinitely bad.  Boundary nodes can be pinned
(Dirichlet), and a coarse-to-fine multilevel scheme supplies starting guesses.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .deform import push_matrix, push_vjp
from .fidelity import HyperelasticParams, hyperelastic, kl
from .forward import ProlongedOperator
from .grid import DensityImage, Deformation, Grid, det_field, identity_deformation, nodal_jacobian

__all__ = [
    "RegistrationProblem",
    "BfgsOptions",
    "MultilevelOptions",
    "objective",
    "objective_parts",
    "bfgs_minimize",
    "restrict_image",
    "prolong_deformation",
    "multilevel_register",
    "write_log",
]

log = logging.getLogger(__name__)

LOG_FIELDS = ["level", "iter", "objective", "kl", "hyper", "grad_norm", "min_det"]


@dataclass
class RegistrationProblem:
    rho0: DensityImage
    f: np.ndarray
    K: object
    hyper: HyperelasticParams = field(default_factory=HyperelasticParams)
    beta: float = 1.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.K.image_grid != self.rho0.grid:
            raise ValueError("operator and template grids differ")
        self.f = np.asarray(self.f, dtype=float)
        if self.f.shape != tuple(self.K.detector_shape):
            raise ValueError("data shape does not match operator")


@dataclass
class BfgsOptions:
    max_iters: int = 100
    ls_max: int = 30
    grad_tol: float = 1e-6
    step_tol: float = 1e-9
    c1: float = 1e-4
    c2: float = 0.9
    memory: int = 10
    max_step: float | None = None  # cap on the first trial step (max-norm)

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.grad_tol <= 0 or self.step_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class MultilevelOptions:
    levels: int = 3
    dirichlet: bool = True

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("need at least one level")


def objective_parts(prob: RegistrationProblem, y: Deformation, with_gradient: bool = True):
    """Return ``(value, grad, kl_part, hyper_part, min_det)``.

    ``value`` is ``inf`` and ``grad`` is None when ``y`` folds a cell.
    """
    min_det = float(det_field(nodal_jacobian(y)).min())
    if min_det <= 0:
        return math.inf, None, math.inf, math.inf, min_det
    rho = prob.rho0.values
    w = (push_matrix(y.grid, y) @ rho.ravel()).reshape(y.grid.dims)
    Kw = prob.K.apply(w)
    klv = kl(Kw, prob.f, with_gradient=with_gradient)
    if prob.beta > 0:
        hyp = hyperelastic(y, prob.hyper, with_gradient=with_gradient)
        hval, hgrad = hyp if with_gradient else (hyp, None)
    else:
        hval, hgrad = 0.0, None
    value = klv.value + prob.beta * hval
    if not with_gradient:
        return value, None, klv.value, hval, min_det
    grad = push_vjp(rho, y, prob.K.adjoint(klv.gradient))
    if hgrad is not None:
        grad = grad + prob.beta * hgrad
    return value, grad, klv.value, hval, min_det


def objective(prob: RegistrationProblem, y: Deformation):
    """Registration objective value and nodal gradient."""
    value, grad, *_ = objective_parts(prob, y)
    return value, grad


# ---------------------------------------------------------------------------
# optimizer


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, yv, rho in reversed(pairs):
        a = rho * (s @ q)
        q -= a * yv
        alphas.append(a)
    s, yv, _ = pairs[-1]
    q *= (s @ yv) / (yv @ yv)
    for (s, yv, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (yv @ q)
        q += (a - b) * s
    return -q


def _line_search(fun, x, fx, g, d, t, opts):
    """Weak Wolfe bisection; infeasible trial points count as Armijo failures."""
    slope = g @ d
    lo, hi = 0.0, math.inf
    best = None
    for _ in range(opts.ls_max):
        fn, gn = fun(x + t * d)
        if not math.isfinite(fn) or fn > fx + opts.c1 * t * slope:
            hi = t
        elif gn @ d < opts.c2 * slope:
            lo = t
            best = (t, fn, gn)
        else:
            return t, fn, gn
        t = 0.5 * (lo + hi) if math.isfinite(hi) else 2.0 * t
    return best if best is not None else (None, None, None)


def bfgs_minimize(objfn, y0: Deformation, opts: BfgsOptions | None = None, bc: str | None = None, callback=None) -> Deformation:
    """Minimize ``objfn(y) -> (value, nodal_grad)`` starting at ``y0``.

    With ``bc="dirichlet"`` the gradient and search direction vanish on
    boundary nodes, so those nodes keep their initial values.  ``callback``
    is called as ``callback(iteration, y, value, grad)`` after every
    accepted step.
    """
    opts = opts or BfgsOptions()
    grid = y0.grid
    shape = y0.nodal_values.shape
    free = np.ones(shape, dtype=bool)
    if bc == "dirichlet":
        free[:, y0.boundary_mask()] = False
    elif bc is not None:
        raise ValueError(f"unknown boundary handling {bc!r}")
    free = free.ravel()

    def fun(x):
        val, grad = objfn(Deformation(grid, x.reshape(shape)))
        if grad is None or not math.isfinite(val):
            return math.inf, None
        return val, np.where(free, np.asarray(grad).ravel(), 0.0)

    x = y0.nodal_values.ravel().copy()
    fx, g = fun(x)
    if not math.isfinite(fx):
        raise ValueError("objective is not finite at the starting point")
    gtol = opts.grad_tol * max(1.0, float(np.abs(g).max()))
    pairs = deque(maxlen=opts.memory)
    for it in range(1, opts.max_iters + 1):
        if np.abs(g).max() <= gtol:
            break
        if pairs:
            d = np.where(free, _two_loop(g, pairs), 0.0)
            t0 = 1.0
        else:
            d = -g
            t0 = 1.0
            if opts.max_step is not None:
                t0 = min(1.0, opts.max_step / float(np.abs(d).max()))
        if g @ d >= 0:
            pairs.clear()
            d = -g
        t, fn, gn = _line_search(fun, x, fx, g, d, t0, opts)
        if t is None:
            if pairs:
                pairs.clear()
                continue
            log.debug("line search failed at iteration %d", it)
            break
        s = t * d
        yv = gn - g
        sy = s @ yv
        if sy > 1e-10 * (s @ s):
            pairs.append((s, yv, 1.0 / sy))
        x = x + s
        fx, g = fn, gn
        if callback is not None:
            callback(it, Deformation(grid, x.reshape(shape)), fx, g)
        if np.abs(s).max() <= opts.step_tol * max(1.0, float(np.abs(x).max())):
            break
    return Deformation(grid, x.reshape(shape))


# ---------------------------------------------------------------------------
# multilevel


def restrict_image(values: np.ndarray, factor: int) -> np.ndarray:
    """Block average by ``factor`` along every axis."""
    shape = []
    for m in values.shape:
        shape += [m // factor, factor]
    return values.reshape(shape).mean(axis=tuple(range(1, 2 * values.ndim, 2)))


def prolong_deformation(y: Deformation, fine: Grid) -> Deformation:
    """Refine nodal values by two with multilinear interpolation (exact for affine maps)."""
    v = y.nodal_values
    for axis in range(1, v.ndim):
        n = v.shape[axis]
        shape = list(v.shape)
        shape[axis] = 2 * n - 1
        out = np.empty(shape)
        even = [slice(None)] * v.ndim
        odd = [slice(None)] * v.ndim
        lo = [slice(None)] * v.ndim
        hi = [slice(None)] * v.ndim
        even[axis] = slice(0, None, 2)
        odd[axis] = slice(1, None, 2)
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        out[tuple(even)] = v
        out[tuple(odd)] = 0.5 * (v[tuple(lo)] + v[tuple(hi)])
        v = out
    return Deformation(fine, v)


def _feasible(y: Deformation) -> Deformation:
    """Scale the displacement back until no cell folds (prolongation can fold)."""
    ident = y.grid.nodes()
    disp = y.nodal_values - ident
    t = 1.0
    for _ in range(30):
        cand = Deformation(y.grid, ident + t * disp)
        if det_field(nodal_jacobian(cand)).min() > 0:
            return cand
        t *= 0.5
    return Deformation(y.grid, ident)


def _level_problem(prob: RegistrationProblem, factor: int) -> RegistrationProblem:
    if factor == 1:
        return prob
    K = ProlongedOperator(prob.K, factor)
    rho = DensityImage(K.image_grid, restrict_image(prob.rho0.values, factor))
    return RegistrationProblem(rho, prob.f, K, prob.hyper, prob.beta)


def multilevel_register(
    prob: RegistrationProblem,
    ml: MultilevelOptions | None = None,
    opts: BfgsOptions | None = None,
    trace: list | None = None,
    y0: Deformation | None = None,
) -> Deformation:
    """Coarse-to-fine registration starting from the identity (or ``y0``)."""
    ml = ml or MultilevelOptions()
    opts = opts or BfgsOptions()
    fine = prob.rho0.grid
    factor = 2 ** (ml.levels - 1)
    if any(m % factor or m // factor < 2 for m in fine.dims):
        raise ValueError(f"{ml.levels} levels incompatible with dims {fine.dims}")
    bc = "dirichlet" if ml.dirichlet else None

    y = None
    for level in range(ml.levels):
        f_lvl = 2 ** (ml.levels - 1 - level)
        lp = _level_problem(prob, f_lvl)
        grid = lp.rho0.grid
        if y is None:
            if y0 is not None:
                idx = (slice(None),) + (slice(None, None, f_lvl),) * grid.ndim
                y = Deformation(grid, y0.nodal_values[idx])
            else:
                y = identity_deformation(grid)
        else:
            y = _feasible(prolong_deformation(y, grid))
        lvl_opts = BfgsOptions(**{**opts.__dict__})
        if lvl_opts.max_step is None:
            lvl_opts.max_step = 0.5 * min(grid.spacing)

        callback = None
        if trace is not None:
            def callback(it, yk, fk, gk, _lp=lp, _level=level):
                value, _, klp, hyp, mdet = objective_parts(_lp, yk, with_gradient=False)
                trace.append(
                    {"level": _level, "iter": it, "objective": value, "kl": klp, "hyper": hyp,
                     "grad_norm": float(np.linalg.norm(gk)), "min_det": mdet}
                )

        y = bfgs_minimize(lambda yy, _lp=lp: objective(_lp, yy), y, lvl_opts, bc, callback)
        log.debug("level %d done (%s)", level, grid.dims)
    return y


def write_log(path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        writer.writerows(trace)
