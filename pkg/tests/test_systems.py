import math

import numpy as np
import pytest
from scipy.linalg import expm

from invman.conditions import check_ab_empirical
from invman.correspondence import HypothesisError
from invman.graph_transform import TransformConfig, invariance_residual, iterate
from invman.systems import (Boussinesq, PolyMap, ResonanceError, boussinesq_galerkin_system, build_system,
                            linear_block_system, poly_perturbed_system, scan_center_dimension,
                            strong_stable_fiber, taylor_oracle, whiskered_torus_system)
from invman.tangent_transform import tangent_at_base


def test_linear_block_zero_truth(rng):
    spec = linear_block_system({"s": [0.9, 0.9], "u": [2.0]})
    assert np.abs(spec.truth_cs(rng.standard_normal((10, 2)))).max() == 0.0


def test_linear_block_shear_truth_is_invariant(rng):
    spec = linear_block_system({"s": [0.9, 0.6], "u": [2.0]}, coupling=0.05)
    mat = spec.info["matrix"]
    x = rng.standard_normal((20, 2))
    w = np.hstack([x, spec.truth_cs(x)])
    img = w @ mat.T
    np.testing.assert_allclose(img[:, 2:], spec.truth_cs(img[:, :2]), atol=1e-12)
    assert np.abs(spec.truth_cs(x)).max() > 0


def test_center_stable_smooth_predicate():
    spec = linear_block_system({"c": [1.05], "u": [2.0]})
    c = spec.constants
    assert c.lambda_cs * c.lambda_u == pytest.approx(0.525, rel=1e-6)
    smooth = spec.info["predicates_smooth"]["predicate_values"]
    assert smooth["spectral_gap"]["passed"] and smooth["spectral_gap"]["lhs"] == pytest.approx(0.525, rel=1e-6)
    # beta' = 0.525 beta for this block, so beta - 2 beta' > 0 cannot hold
    assert not smooth["angle_beta_margin"]["passed"]


def test_poly_quadratic_series():
    spec = poly_perturbed_system([0.5, 2.0], [(1, 1.0, (2, 0))], (0, 1, 1))
    ser = spec.info["series_cs"]
    assert ser.coefficients() == [{(2,): pytest.approx(-4 / 7, abs=1e-15)}]
    assert max(ser.residuals) <= 1e-12


def test_poly_unstable_side_series():
    spec = poly_perturbed_system([0.5, 2.0], [(0, 1.0, (0, 2))], (0, 1, 1))
    ser = spec.info["series_cu"]
    assert ser.coefficients() == [{(2,): pytest.approx(2 / 7, abs=1e-15)}]


def test_poly_zero_terms_is_linear(rng):
    spec = poly_perturbed_system([0.5, 2.0], [], (0, 1, 1))
    assert spec.info["series_cs"].coefficients() == [{}]
    x, z = rng.uniform(-0.2, 0.2, (10, 1)), rng.uniform(-0.2, 0.2, (10, 1))
    f, g = spec.cs_handle.pair.evaluate(x, z)
    np.testing.assert_allclose(f, 0.5 * x, atol=1e-14)
    np.testing.assert_allclose(g, z / 2, atol=1e-14)


def test_taylor_resonance_and_order_limit():
    pmap = PolyMap([0.5, 0.25], [(1, 1.0, (2, 0))], (0, 1, 1))
    with pytest.raises(ResonanceError) as exc:
        taylor_oracle(pmap, "cs", 4)
    assert exc.value.component == 1 and exc.value.exponent == (2,)
    with pytest.raises(ValueError):
        taylor_oracle(pmap, "cs", 13)


def test_torus_unperturbed_truth_and_predicates(rng):
    spec = whiskered_torus_system()
    assert np.abs(spec.truth_cs(rng.standard_normal((5, 3)))).max() == 0.0
    assert spec.info["predicates"]["passed"]
    assert spec.info["lambda_s_block"] == pytest.approx(0.5 * 0.9)
    assert spec.params["omega"][0] == pytest.approx(2 * math.pi * (math.sqrt(5) - 1) / 2)
    with pytest.raises(HypothesisError, match="spectral"):
        whiskered_torus_system(mu=2.0)


def test_torus_perturbed_invariance_and_tangency(torus, rng):
    spec, cfg, h, rep = torus
    assert rep.converged and rep.conformance
    th = rng.uniform(0, 2 * math.pi, (100, 1))
    fib = rng.uniform(-0.5 * cfg.eps0, 0.5 * cfg.eps0, (100, 2))
    assert invariance_residual(h, spec.cs_problem(), np.hstack([th, fib])).max() <= 1e-3
    K = tangent_at_base(spec.cs_problem(), cfg)
    assert np.linalg.norm(K, 2, axis=(1, 2)).max() <= 1e-3


def test_strong_stable_fiber_unperturbed():
    spec = whiskered_torus_system()
    fib = strong_stable_fiber(spec, 0.3, n_orbit=30)
    assert np.abs(fib.values).max() <= 1e-12


def test_strong_stable_fiber_perturbed():
    spec = whiskered_torus_system(eps=0.01)
    fib = strong_stable_fiber(spec, 0.3)
    lam = spec.info["lambda_s_block"]
    assert np.abs(fib.values).max() <= 1e-3
    assert fib.lipschitz <= lam + 0.05
    dn = fib.deviation_norms(spec.params["omega"])
    moving = dn[0] > 1e-8 * dn[0].max()
    n = np.arange(21)[:, None]
    assert np.all(dn[:21, moving] <= (lam + 0.05) ** n * dn[0, moving] * (1 + 1e-12))


def test_boussinesq_structure():
    bq = Boussinesq(8, 0.02, 0.1)
    assert bq.dims == (2, 7, 7)
    ev = np.sort_complex(np.linalg.eigvals(bq.matrix()))
    formula = np.sort_complex(bq.spectrum_formula())
    assert np.abs(ev - formula).max() / np.abs(formula).max() <= 1e-12
    assert scan_center_dimension(8, [0.02, 0.03]) == {0.02: 2, 0.03: 0}
    with pytest.raises(ValueError):
        Boussinesq(40, 0.02, 0.1)


def test_boussinesq_linear_propagation(rng):
    bq = Boussinesq(8, 0.02, 0.1, nonlinear=False)
    x = rng.uniform(-0.01, 0.01, (5, 9))
    p_t0 = rng.uniform(-0.01, 0.01, (5, 7))
    r = bq.solve_boundary_value(x, p_t0)
    # closed form: hyperbolic modes decay at exp(-lam t0)
    p0 = p_t0 * np.exp(-bq.lam * 0.1)
    np.testing.assert_allclose(r["G"], p0, rtol=1e-12)
    np.testing.assert_allclose(r["F"][:, 2:], x[:, 2:] * np.exp(-bq.lam * 0.1), rtol=1e-12)
    # center mode k = 1 in (a, b) coordinates, propagated with its own 2x2 exponential
    blk = np.array([[0.0, 1.0], [bq.disc[0], 0.0]])
    ab0 = bq.from_eigen(np.hstack([x, p0]))[:, [0, 8]]
    ab1 = ab0 @ expm(0.1 * blk).T
    np.testing.assert_allclose(r["F"][:, :2], np.column_stack([ab1[:, 0], ab1[:, 1] / bq.omega[0]]), atol=1e-14)
    # the eigen-coordinates diagonalize the hyperbolic block
    e = np.zeros((1, 16))
    e[0, 2] = 1.0
    np.testing.assert_allclose(bq.from_eigen(e) @ bq.matrix().T, -bq.lam[0] * bq.from_eigen(e), atol=1e-9)


def test_boussinesq_linear_section_is_zero():
    spec = boussinesq_galerkin_system(nonlinear=False)
    h, rep = iterate(spec.cs_problem(), TransformConfig(sigma=0.01, eps=0.01, rho=0.01, nodes=3,
                                                        interpolation="linear"))
    assert np.abs(h.values).max() == 0.0


def test_boussinesq_shooting(rng):
    bq = Boussinesq(8, 0.02, 0.1)
    x = rng.uniform(-0.01, 0.01, (100, 9))
    p = rng.uniform(-0.01, 0.01, (100, 7))
    r = bq.solve_boundary_value(x, p)
    assert r["residual"] <= 1e-8 and r["iterations"] <= 30
    tiny = bq.solve_boundary_value(1e-4 * x[:5], 1e-4 * p[:5])
    assert tiny["residual"] <= 1e-10 and tiny["iterations"] <= 30
    with pytest.raises(HypothesisError, match="non-contraction|converge"):
        bq.solve_boundary_value(50 * np.ones((1, 9)), 50 * np.ones((1, 7)))


def test_build_system_registry():
    spec = build_system("linear_block", {"blocks": {"s": [0.5], "u": [2.0]}})
    assert spec.dims == (0, 1, 1)
    with pytest.raises(ValueError, match="unknown system"):
        build_system("lorenz", {})


@pytest.mark.parametrize("build", [
    lambda: linear_block_system({"s": [0.9, 0.6], "u": [2.0]}, coupling=0.05),
    lambda: linear_block_system({"c": [1.05], "s": [0.5], "u": [2.5]}, coupling=0.02),
    lambda: poly_perturbed_system([0.5, 2.0], [(1, 1.0, (2, 0))], (0, 1, 1)),
    lambda: whiskered_torus_system(eps=0.01),
    lambda: boussinesq_galerkin_system(),
], ids=["shear", "coupled", "poly", "torus", "boussinesq"])
def test_certified_constants_hold_empirically(build):
    spec = build()
    rep = check_ab_empirical(spec.cs_handle, spec.constants, rng=np.random.default_rng(0))
    assert rep.passed and rep.violated_pairs == []
