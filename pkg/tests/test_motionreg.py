import math

import numpy as np
import pytest

from conftest import smooth_deformation
from moco.deform import invertibility_report, push_matrix
from moco.fidelity import HyperelasticParams
from moco.forward import GaussianBlur
from moco.grid import DensityImage, Deformation, Grid, det_field, identity_deformation, nodal_jacobian
from moco.motionreg import (
    BfgsOptions,
    MultilevelOptions,
    RegistrationProblem,
    bfgs_minimize,
    multilevel_register,
    objective,
    objective_parts,
    prolong_deformation,
    restrict_image,
    write_log,
)
from moco.phantoms import RadialMap


def blob(g, c=(0.0, 0.0), s=0.35, scale=1000.0):
    x = g.cell_centers()
    return scale * np.exp(-((x[0] - c[0]) ** 2 + (x[1] - c[1]) ** 2) / (2 * s**2))


def make_problem(n=16, beta=10.0, motion=0.15):
    g = Grid.box((n, n))
    K = GaussianBlur(g, 0.08)
    rho = DensityImage(g, blob(g))
    y_true = Deformation.from_function(g, RadialMap(motion, rmax=0.95))
    f = K.apply((push_matrix(g, y_true) @ rho.values.ravel()).reshape(g.dims))
    return RegistrationProblem(rho, f, K, HyperelasticParams(), beta), y_true


def test_objective_gradient_fd(rng):
    prob, _ = make_problem(12)
    y = smooth_deformation(prob.rho0.grid, rng, amp=0.05)
    val, grad = objective(prob, y)
    h = 1e-6
    flat = y.nodal_values.ravel()
    for i in rng.choice(flat.size, 15, replace=False):
        e = np.zeros_like(flat)
        e[i] = h
        fp, _ = objective(prob, Deformation(y.grid, (flat + e).reshape(y.nodal_values.shape)))
        fm, _ = objective(prob, Deformation(y.grid, (flat - e).reshape(y.nodal_values.shape)))
        assert (fp - fm) / (2 * h) == pytest.approx(grad.ravel()[i], rel=1e-4, abs=1e-6 * np.abs(grad).max())


def test_objective_parts_sum_and_infeasible():
    prob, y_true = make_problem(12)
    value, _, klp, hyp, mdet = objective_parts(prob, y_true)
    assert value == pytest.approx(klp + prob.beta * hyp, rel=1e-14)
    assert mdet > 0
    g = prob.rho0.grid
    flip = Deformation.from_function(g, lambda x: np.stack([-x[0], x[1]]))
    val, grad, *_ = objective_parts(prob, flip)
    assert val == math.inf and grad is None


def test_problem_validation():
    prob, _ = make_problem(8)
    with pytest.raises(ValueError):
        RegistrationProblem(prob.rho0, prob.f[:4], prob.K)
    with pytest.raises(ValueError):
        RegistrationProblem(prob.rho0, prob.f, prob.K, beta=-1.0)
    with pytest.raises(ValueError):
        RegistrationProblem(DensityImage(Grid.box((4, 4)), np.ones((4, 4))), prob.f, prob.K)


def test_bfgs_minimizes_quadratic():
    g = Grid.box((4, 4))
    target = g.nodes() + 0.1

    def fn(y):
        r = y.nodal_values - target
        return 0.5 * float(np.sum(r**2)), r

    y = bfgs_minimize(fn, identity_deformation(g), BfgsOptions(max_iters=50))
    np.testing.assert_allclose(y.nodal_values, target, atol=1e-6)


def test_bfgs_dirichlet_keeps_boundary():
    g = Grid.box((4, 4))
    target = g.nodes() + 0.1

    def fn(y):
        r = y.nodal_values - target
        return 0.5 * float(np.sum(r**2)), r

    y0 = identity_deformation(g)
    y = bfgs_minimize(fn, y0, BfgsOptions(max_iters=50), bc="dirichlet")
    mask = y0.boundary_mask()
    np.testing.assert_array_equal(y.nodal_values[:, mask], y0.nodal_values[:, mask])
    np.testing.assert_allclose(y.nodal_values[:, ~mask], target[:, ~mask], atol=1e-6)
    with pytest.raises(ValueError):
        bfgs_minimize(fn, y0, bc="periodic")


def test_bfgs_rejects_infeasible_start():
    g = Grid.box((4, 4))
    with pytest.raises(ValueError):
        bfgs_minimize(lambda y: (math.inf, None), identity_deformation(g))


def test_bfgs_options_validation():
    with pytest.raises(ValueError):
        BfgsOptions(c1=0.5, c2=0.1)
    with pytest.raises(ValueError):
        MultilevelOptions(levels=0)


def test_restrict_and_prolong():
    v = np.arange(16.0).reshape(4, 4)
    np.testing.assert_allclose(restrict_image(v, 2), [[2.5, 4.5], [10.5, 12.5]])
    coarse = Grid.box((4, 4))
    fine = Grid.box((8, 8))
    A = np.array([[1.1, 0.2], [-0.1, 0.9]])
    yc = Deformation.from_function(coarse, lambda x: np.tensordot(A, x, axes=(1, 0)))
    yf = Deformation.from_function(fine, lambda x: np.tensordot(A, x, axes=(1, 0)))
    np.testing.assert_allclose(prolong_deformation(yc, fine).nodal_values, yf.nodal_values, atol=1e-14)


def test_multilevel_recovers_radial_motion(tmp_path):
    prob, y_true = make_problem(32, beta=1.0)
    trace = []
    y = multilevel_register(prob, MultilevelOptions(levels=3), BfgsOptions(max_iters=80), trace=trace)
    g = prob.rho0.grid
    # boundary pinned, no folds
    mask = y.boundary_mask()
    np.testing.assert_allclose(y.nodal_values[:, mask], g.nodes()[:, mask], atol=0)
    rep = invertibility_report(y)
    assert rep.min_det > 0 and rep.fraction_multi <= 0.05
    # the transported template explains the motion far better than no motion
    tmpl = prob.rho0.values.ravel()
    truth = push_matrix(g, y_true) @ tmpl
    est = push_matrix(g, y) @ tmpl
    assert np.linalg.norm(est - truth) < 0.35 * np.linalg.norm(tmpl - truth)
    assert {row["level"] for row in trace} == {0, 1, 2}
    write_log(tmp_path / "reg.csv", trace)
    assert (tmp_path / "reg.csv").read_text().startswith("level,iter,objective")


def test_multilevel_rejects_incompatible_levels():
    prob, _ = make_problem(12)
    with pytest.raises(ValueError):
        multilevel_register(prob, MultilevelOptions(levels=4))


def test_registration_keeps_det_positive():
    prob, _ = make_problem(16, beta=1e-3, motion=0.4)
    y = multilevel_register(prob, MultilevelOptions(levels=2), BfgsOptions(max_iters=40))
    assert det_field(nodal_jacobian(y)).min() > 0
