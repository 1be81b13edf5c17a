import numpy as np
import pytest

from invman.atlas import GraphSection
from invman.graph_transform import TransformConfig, bump, iterate
from invman.systems import linear_block_system, whiskered_torus_system
from invman.tangent_transform import (TangentSection, fd_section_derivative, hoelder_estimate, iterate_tangent,
                                      tangent_at_base, tangent_contraction, transform_tangent_once,
                                      truncation_derivative)


@pytest.fixture(scope="module")
def diag():
    return linear_block_system({"s": [0.9, 0.9], "u": [2.0]})


@pytest.fixture(scope="module")
def quad_tangent(quadratic):
    spec, cfg, h, _ = quadratic
    K, rep = iterate_tangent(spec.cs_problem(), h, cfg)
    return K, rep


def test_truncation_derivative_plateaus(diag):
    prob = diag.cs_problem()
    cfg = TransformConfig(sigma=0.1)
    u = np.array([[0.3], [0.3]])
    df1, dg1 = truncation_derivative(prob, cfg, np.array([[0.0, 0.01], [0.5, 0.0]]), u)
    np.testing.assert_array_equal(df1[:, :, :2], np.broadcast_to(np.eye(2), (2, 2, 2)))
    np.testing.assert_array_equal(df1[:, :, 2:], 0.0)
    np.testing.assert_array_equal(dg1[0], [[0.0, 0.0, 1.0]])
    np.testing.assert_array_equal(dg1[1], [[0.0, 0.0, 0.0]])


def test_truncation_derivative_transition_fd(diag, rng):
    prob = diag.cs_problem()
    cfg = TransformConfig(sigma=0.1)
    x = rng.uniform(cfg.eta2 + 0.002, cfg.eta1 - 0.002, (20, 1)) * np.array([[1.0, 0.3]])
    u = rng.uniform(-0.1, 0.1, (20, 1))
    _, dg1 = truncation_derivative(prob, cfg, x, u)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (bump(x + e, cfg) - bump(x - e, cfg)) / (2 * h) * u[:, 0]
        np.testing.assert_allclose(dg1[:, 0, j], fd, atol=1e-6)


def test_linear_system_tangent_is_zero(diag):
    prob = diag.cs_problem()
    cfg = TransformConfig(nodes=11)
    h0, _ = iterate(prob, cfg)
    K0 = TangentSection.zeros(prob.atlas, h0.grid, 1)
    assert np.abs(transform_tangent_once(K0, h0, prob, cfg).values).max() == 0.0
    K, rep = iterate_tangent(prob, h0, cfg)
    assert np.abs(K.values).max() == 0.0
    assert np.abs(fd_section_derivative(h0)).max() == 0.0
    assert hoelder_estimate(K) == 0.0


def test_quadratic_tangent_field(quadratic, quad_tangent):
    _, _, h, _ = quadratic
    K, rep = quad_tangent
    x = h.grid.points()[:, 0]
    assert np.abs(K.values[0, :, 0, 0] + 8 * x / 7).max() <= 1e-3
    assert rep["final_change"] <= 1e-10
    assert rep["fd_error"] <= rep["fd_tolerance"]
    assert hoelder_estimate(K) == pytest.approx(8 / 7, rel=1e-3)


def test_tangent_contraction_bound(quadratic, quad_tangent):
    spec, cfg, h, rep = quadratic
    c = spec.constants
    mu1 = rep.bound_details["mu1"]
    bound = c.lambda_cs * c.lambda_u / (1 - rep.bound_details["alpha"] * mu1)
    assert tangent_contraction(spec.cs_problem(), h, cfg) <= 1.1 * bound


def test_tangent_at_base_block_diagonal(diag):
    K = tangent_at_base(diag.cs_problem(), TransformConfig())
    assert np.abs(K).max() == 0.0


def test_tangent_at_base_coupled():
    eps = 0.1
    # map (x, y) -> (0.5 x, 2 y + eps x); stable eigenvector (1, -eps / 1.5)
    spec = linear_block_system({"s": [0.5], "u": [2.0]}, coupling=1.0, coupling_matrix=[[0.0, 0.0], [eps, 0.0]])
    K = tangent_at_base(spec.cs_problem(), TransformConfig())
    assert 0 < abs(K[0, 0, 0]) <= spec.constants.beta_prime
    assert K[0, 0, 0] == pytest.approx(-eps / 1.5, abs=1e-13)


def test_torus_tangent_zero():
    spec = whiskered_torus_system(eps=0.0)
    K = tangent_at_base(spec.cs_problem(), TransformConfig(sigma=0.1, mode="invariant"))
    assert np.abs(K).max() == 0.0
    cfg = TransformConfig(sigma=0.1, eps=0.1, rho=0.1, nodes=5, mode="invariant")
    h0, _ = iterate(spec.cs_problem(), cfg)
    K, _ = iterate_tangent(spec.cs_problem(), h0, cfg)
    assert np.abs(K.values).max() <= 1e-12


def test_torus_hoelder_finite(torus):
    _, _, h, _ = torus
    K = TangentSection(h.atlas, h.grid, fd_section_derivative(h))
    assert np.isfinite(hoelder_estimate(K))


def test_tangent_csv_header(quadratic, quad_tangent):
    K, _ = quad_tangent
    lines = K.to_csv().splitlines()
    assert lines[0] == "s0,K0_0" and len(lines) == 1 + 101
