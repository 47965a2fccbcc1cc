import math

import numpy as np
import pytest

from moco.config import Config, ReconConfig
from moco.deform import push_matrix
from moco.emtv import EmtvOptions, bregman_emtv
from moco.fidelity import HyperelasticParams, hyperelastic, kl, tv
from moco.forward import GaussianBlur, IdentityOperator, StackedOperator
from moco.grid import DensityImage, Deformation, Grid, identity_deformation
from moco.motionreg import BfgsOptions, MultilevelOptions
from moco.phantoms import RadialMap, make_ring_phantom
from moco.pipeline import (
    GatedData,
    affine_register,
    alternating_minimize,
    full_objective,
    make_operator,
    make_phantom,
    metrics,
    roi_error,
    simulate_gated_data,
    write_metrics_csv,
    write_trace,
)


@pytest.fixture(scope="module")
def ring32():
    return make_ring_phantom(Grid.box((32, 32)), intensity=1e5)


def small_recon_cfg(gates=3, **kw):
    base = dict(
        gates=gates,
        alpha=1.0,
        beta=3e6,
        outer_alternations=2,
        emtv=EmtvOptions(alpha=1.0, outer_iters=15, bregman_iters=2),
        bfgs=BfgsOptions(max_iters=30),
        multilevel=MultilevelOptions(levels=2),
    )
    base.update(kw)
    return ReconConfig(**base)


def test_simulation_is_deterministic(ring32):
    K = IdentityOperator(ring32.template.grid)
    a = simulate_gated_data(ring32, K, 10.0, seed=3)
    b = simulate_gated_data(ring32, K, 10.0, seed=3)
    c = simulate_gated_data(ring32, K, 10.0, seed=4)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert a.n_gates == 3 and a[1].shape == (32, 32)
    # counts are integers once the scale is divided out
    q = a.values / a.scale
    np.testing.assert_array_equal(q, np.round(q))
    with pytest.raises(ValueError):
        simulate_gated_data(ring32, K, 0.0, seed=0)


def test_small_scale_approaches_expected_totals(ring32):
    K = GaussianBlur(ring32.template.grid, 0.05)
    d = simulate_gated_data(ring32, K, 1e-3, seed=0)
    for i, img in enumerate(ring32.images):
        expected = K.apply(img.values)
        assert d[i].sum() == pytest.approx(expected.sum(), rel=0.01)
        assert np.linalg.norm(d[i] - expected) / np.linalg.norm(expected) < 0.01


def test_metrics_exact_and_zero(ring32):
    tr = make_ring_phantom(Grid.box((64, 64)))
    rec = metrics(tr.template.values, tr.deformations, tr)
    assert rec.recon_error == 0.0
    assert rec.phantom_matching_error <= 0.02
    assert len(rec.mass_errors) == 3 and max(rec.mass_errors) < 0.02
    zero = metrics(np.zeros((32, 32)), [], ring32)
    assert zero.recon_error == 1.0 and math.isnan(zero.phantom_matching_error)
    assert zero.mass_errors == []


def test_metrics_identity_pme_is_direct_difference(ring32):
    g = ring32.template.grid
    ident = [identity_deformation(g)] * 3
    rec = metrics(ring32.template.values, ident, ring32)
    t = ring32.template.values
    direct = np.mean([np.linalg.norm(t - ring32.images[i].values) / np.linalg.norm(ring32.images[i].values)
                      for i in (1, 2)])
    assert rec.phantom_matching_error == pytest.approx(direct, rel=1e-12)


def test_roi_error():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[1.0, 2.0], [3.0, 8.0]])
    m = np.array([[True, False], [False, True]])
    assert roi_error(a, b, m) == pytest.approx(4.0 / math.sqrt(65.0))
    assert roi_error(a, b, ~m) == 0.0


def test_affine_identical_inputs(ring32):
    t = ring32.template.values
    A, b, y = affine_register(t, t, ring32.template.grid)
    np.testing.assert_allclose(A, np.eye(2), atol=1e-6)
    np.testing.assert_allclose(b, 0.0, atol=1e-6)


def test_affine_recovers_known_map():
    g = Grid.box((128, 128))
    x = g.cell_centers()
    t = np.exp(-((x[0] - 0.1) ** 2 / 0.08 + (x[1] + 0.05) ** 2 / 0.03))
    A_true = np.array([[1.08, 0.05], [-0.03, 0.94]])
    b_true = np.array([0.04, -0.02])
    y = Deformation.from_function(g, lambda z: np.tensordot(A_true, z, axes=(1, 0)) + b_true.reshape(2, 1, 1))
    target = (push_matrix(g, y) @ t.ravel()).reshape(g.dims)
    A, b, _ = affine_register(t, target, g)
    np.testing.assert_allclose(A, A_true, atol=1e-3)
    np.testing.assert_allclose(b, b_true, atol=1e-3)


def test_full_objective_parts(ring32):
    g = ring32.template.grid
    K = GaussianBlur(g, 0.05)
    data = simulate_gated_data(ring32, K, 10.0, seed=0)
    cfg = small_recon_cfg()
    rho = ring32.template.values
    parts = full_objective(rho, ring32.deformations, data, K, cfg)
    A = StackedOperator(K, ring32.deformations)
    kl_ref = kl(A.apply(rho), data.values, with_gradient=False).value
    hyp = sum(hyperelastic(y, cfg.hyper) for y in ring32.deformations[1:])
    assert parts["KL"] == pytest.approx(kl_ref, rel=1e-12)
    assert parts["TV"] == pytest.approx(tv(rho, g.spacing), rel=1e-12)
    assert parts["hyper"] == pytest.approx(hyp, rel=1e-12)
    assert parts["J"] == pytest.approx(kl_ref + cfg.alpha * parts["TV"] + cfg.beta * hyp, rel=1e-12)


def test_gate_mismatch_raises(ring32):
    K = IdentityOperator(ring32.template.grid)
    data = simulate_gated_data(ring32, K, 10.0, seed=0)
    with pytest.raises(ValueError):
        alternating_minimize(data, K, small_recon_cfg(gates=4))


def test_zero_motion_oracle(tmp_path):
    g = Grid.box((32, 32))
    truth = make_ring_phantom(g, stages=3, shrink_rates=[0.0, 0.0, 0.0], intensity=1e5)
    K = GaussianBlur(g, 0.05)
    one = simulate_gated_data(truth, K, 10.0, seed=2)
    data = GatedData(np.stack([one[0]] * 3), one.scale)
    # stiff motion prior: the reference is smoother than the data, so a soft
    # prior lets the motion step fit the residual by a fraction of a cell
    cfg = small_recon_cfg(beta=1e8)
    rho0, ys, rec, trace = alternating_minimize(data, K, cfg, truth)
    ident = identity_deformation(g)
    h = min(g.spacing)
    for y in ys:
        assert np.abs(y.nodal_values - ident.nodal_values).max() < 0.5 * h
    pooled = bregman_emtv(StackedOperator(K, [ident] * 3), data.values,
                          EmtvOptions(**{**cfg.emtv.__dict__, "alpha": cfg.alpha}))
    assert np.linalg.norm(rho0 - pooled) / np.linalg.norm(pooled) < 1e-3
    # the objective never increases over the half-steps
    J = [row["J"] for row in trace if row["half"] != "final"]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(J, J[1:]))
    assert trace[-1]["half"] == "final"
    write_trace(tmp_path / "t.csv", trace)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "step,half,J,KL,TV,hyper"
    write_metrics_csv(tmp_path / "m.csv", {"proposed": rec})
    assert (tmp_path / "m.csv").read_text().startswith("method,recon_error,pme,mass_err_mean")


def test_independent_noise_static_motion_stays_small():
    g = Grid.box((32, 32))
    truth = make_ring_phantom(g, stages=3, shrink_rates=[0.0, 0.0, 0.0], intensity=1e5)
    K = GaussianBlur(g, 0.05)
    data = simulate_gated_data(truth, K, 10.0, seed=2)
    _, ys, _, _ = alternating_minimize(data, K, small_recon_cfg())
    ident = identity_deformation(g)
    for y in ys:
        assert np.abs(y.nodal_values - ident.nodal_values).max() < 0.5 * min(g.spacing)


def test_threads_match_serial(ring32):
    g = ring32.template.grid
    K = GaussianBlur(g, 0.05)
    data = simulate_gated_data(ring32, K, 10.0, seed=1)
    cfg = small_recon_cfg(outer_alternations=1)
    a = alternating_minimize(data, K, cfg, workers=1)
    b = alternating_minimize(data, K, cfg, workers=2)
    np.testing.assert_array_equal(a[0], b[0])
    for ya, yb in zip(a[1], b[1]):
        np.testing.assert_array_equal(ya.nodal_values, yb.nodal_values)


def test_make_phantom_and_operator():
    cfg = Config()
    cfg.phantom.size = 16
    cfg.phantom.gates = 5
    tr = make_phantom(cfg)
    assert tr.n_gates == 5
    K = make_operator(cfg, tr.template.grid)
    assert K.apply(tr.template.values).shape == (16, 16)
    cfg.phantom.kind = "spiral"
    with pytest.raises(ValueError):
        make_phantom(cfg)
