import math

import numpy as np
import pytest

from invman.atlas import GraphSection
from invman.correspondence import HypothesisError
from invman.graph_transform import TransformConfig, iterate
from invman.systems import direct_cu_problem, linear_block_system, poly_perturbed_system, whiskered_torus_system
from invman.trichotomy import (OrbitSegment, center_bi_invariance, classify_orbit, compute_cs, compute_cu_via_dual,
                               generate_orbit, growth_characterization, intersect_center)

INFLOW = dict(sigma=0.15, rho=0.1, eps=0.15, nodes=101, mode="strictly_inflowing")


@pytest.fixture(scope="module")
def torus_flat():
    spec = whiskered_torus_system(eps=0.0)
    cfg = TransformConfig(sigma=0.1, eps=0.1, rho=0.1, nodes=5, mode="invariant")
    h_cs, _ = compute_cs(spec, cfg)
    h_cu, _ = compute_cu_via_dual(spec, cfg)
    return spec, cfg, intersect_center(h_cs, h_cu)


def test_compute_cs_linear_zero():
    h, rep = compute_cs(linear_block_system({"s": [0.9, 0.9], "u": [2.0]}), TransformConfig(nodes=21))
    assert np.abs(h.values).max() <= 1e-10
    assert rep["representation"]["passed"]


def test_compute_cu_linear_zero():
    spec = linear_block_system({"s": [0.5], "u": [1.1, 2.0]})
    h, rep = compute_cu_via_dual(spec, TransformConfig(nodes=11, mode="strictly_inflowing"))
    assert h.grid.dim == 2 and h.du == 1
    assert np.abs(h.values).max() <= 1e-10


def test_dual_matches_direct(coupled):
    spec, cfg, h_dual = coupled["spec"], coupled["cu_cfg"], coupled["h_cu"]
    h_direct, _ = iterate(direct_cu_problem(spec), cfg)
    assert np.abs(h_dual.values - h_direct.values).max() <= 1e-10


def test_quadratic_unstable_manifold_series():
    spec = poly_perturbed_system([0.5, 2.0], [(0, 1.0, (0, 2))], (0, 1, 1))
    h, rep = compute_cu_via_dual(spec, TransformConfig(**INFLOW))
    y = np.linspace(-0.1, 0.1, 201)[:, None]
    assert np.abs(h.evaluate(y)[:, 0] - 2 / 7 * y[:, 0] ** 2).max() <= 1e-4
    assert np.abs(h.evaluate(y) - spec.truth_cu(y)).max() <= 1e-4


def test_center_of_zero_sections():
    spec = linear_block_system({"c": [1.05], "s": [0.5], "u": [2.5]})
    h_cs, _ = compute_cs(spec, TransformConfig(nodes=11))
    h_cu, _ = compute_cu_via_dual(spec, TransformConfig(nodes=11, mode="strictly_inflowing"))
    triple = intersect_center(h_cs, h_cu)
    assert np.abs(triple.center).max() <= 1e-10 and triple.residual <= 1e-10


def test_center_refuses_steep_sections(coupled):
    h_cs, h_cu = coupled["h_cs"], coupled["h_cu"]
    steep_cs = h_cs.with_values(5.0 * h_cs.node_points()[:, -1:].reshape(h_cs.values.shape))
    steep_cu = h_cu.with_values(5.0 * h_cu.node_points()[:, -1:].reshape(h_cu.values.shape))
    with pytest.raises(HypothesisError, match=">= 1"):
        intersect_center(steep_cs, steep_cu)


def test_coupled_center_bi_invariance(coupled):
    triple = coupled["triple"]
    assert triple.residual <= 1e-10 and triple.mu_c < 1
    inv = center_bi_invariance(coupled["spec"], triple, coupled["cs_cfg"], coupled["cu_cfg"])
    assert inv["points"] > 50
    assert inv["forward"] <= 5e-4 and inv["backward"] <= 5e-4


def test_orbit_through_base_point_stays_on_base(torus):
    spec, cfg, h, _ = torus
    orbit = generate_orbit(spec.cs_problem(), h, [0.7, 0.0, 0.0], 10, cfg)
    assert np.abs(orbit.x[:, 1:]).max() <= 1e-12 and np.abs(orbit.u).max() <= 1e-12
    assert orbit.base_drift <= 1e-12


def test_quadratic_orbit_contracts(quadratic):
    spec, cfg, h, rep = quadratic
    orbit = generate_orbit(spec.cs_problem(), h, [0.05], 20, cfg)
    k = np.arange(21)
    assert np.all(np.abs(orbit.x[:, 0]) <= 0.5 ** k * 0.05 * 1.05)
    report = classify_orbit(orbit, h, rep.lambda_hat_bound, cfg.rho)
    assert report.passed and max(orbit.residuals) <= 1e-10


def test_off_graph_orbit_leaves_tube(quadratic):
    spec, cfg, h, _ = quadratic
    x0 = np.array([0.05])
    orbit = generate_orbit(spec.cs_problem(), h, x0, 50, cfg, u0=h.evaluate(x0[None])[0] + 1e-3, method="dynamics")
    assert orbit.truncated.startswith("left the tube") and orbit.length < 50
    with pytest.raises(ValueError, match="outside tube"):
        generate_orbit(spec.cs_problem(), h, [0.2], 5, cfg)


def test_classify_detects_noise(quadratic):
    spec, cfg, h, rep = quadratic
    orbit = generate_orbit(spec.cs_problem(), h, [0.05], 10, cfg, method="exact")
    assert classify_orbit(orbit, h, rep.lambda_hat_bound, cfg.rho).passed
    noisy = OrbitSegment(orbit.x.copy(), orbit.u.copy(), orbit.residuals)
    noisy.u[5] += 1e-2
    bad = classify_orbit(noisy, h, rep.lambda_hat_bound, cfg.rho)
    assert not bad.passed and [v["index"] for v in bad.violated_pairs] == [5]


def test_biinfinite_orbit_on_center(torus_flat):
    spec, cfg, triple = torus_flat
    omega = spec.params["omega"][0]
    th = (0.4 + omega * np.arange(-5, 6)) % (2 * math.pi)
    x = np.column_stack([th, np.zeros((11, 2))])
    orbit = OrbitSegment(x, np.zeros((11, 1)), np.zeros(10), direction="biinfinite")
    assert classify_orbit(orbit, triple.h_cs, 0.5, cfg.rho, triple=triple).passed


def test_growth_characterization(torus):
    spec, cfg, h, _ = torus
    orbit = generate_orbit(spec.cs_problem(), h, [1.1, 0.0, 0.004], 15, cfg)
    rep = growth_characterization(orbit, h, cfg, lam_cs=0.45, beta0=1.0)
    assert rep.passed and rep.predicate_values["status"] == "asserted"
    res = np.asarray(rep.predicate_values["membership"])
    assert res.max() <= 1e-6
    wild = OrbitSegment(orbit.x, orbit.u + 0.05, orbit.residuals)
    rep = growth_characterization(wild, h, cfg, lam_cs=0.45, beta0=1.0)
    assert rep.passed and rep.predicate_values["status"] == "inconclusive"
    with pytest.raises(ValueError, match="invariant"):
        growth_characterization(orbit, h, TransformConfig(sigma=0.1), lam_cs=0.45, beta0=1.0)


def test_orbit_csv_round_trip(quadratic):
    spec, cfg, h, _ = quadratic
    orbit = generate_orbit(spec.cs_problem(), h, [0.05], 5, cfg)
    back = OrbitSegment.from_csv(orbit.to_csv())
    np.testing.assert_array_equal(back.x, orbit.x)
    np.testing.assert_array_equal(back.u, orbit.u)
    np.testing.assert_array_equal(back.residuals, orbit.residuals)


def test_triple_write(tmp_path, coupled):
    coupled["triple"].write(str(tmp_path / "m"))
    names = sorted(p.name for p in tmp_path.iterdir())
    assert "m_center.csv" in names and "m_summary.json" in names and "m_cs.csv" in names
    assert isinstance(coupled["h_cs"], GraphSection)
