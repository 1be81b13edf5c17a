import json
import math

import numpy as np
import pytest

from invman.conditions import (ABConstants, ab_from_additive_lipschitz, ab_from_max_lipschitz,
                               check_ab_empirical, check_cone_linearized, check_hyperbolicity_predicates,
                               derive_ab_constants, estimate_lipschitz_constants, max_form_from_additive)
from invman.correspondence import from_generating_maps, from_map


def linear_model(a_s, a_cross_x, a_cross_z, a_u, dims=(1, 1)):
    """Pair ``F = a_s x + a_cross_x z``, ``G = a_cross_z x + a_u z`` with matrix blocks."""
    ms, mfx, mgz, mu = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (a_s, a_cross_x, a_cross_z, a_u))

    def jac(x, z):
        n = x.shape[0]
        df = np.broadcast_to(np.hstack([ms, mfx]), (n,) + (ms.shape[0], ms.shape[1] + mfx.shape[1]))
        dg = np.broadcast_to(np.hstack([mgz, mu]), (n,) + (mu.shape[0], mgz.shape[1] + mu.shape[1]))
        return df, dg

    return from_generating_maps(lambda x, z: x @ ms.T + z @ mfx.T, lambda x, z: x @ mgz.T + z @ mu.T,
                                (1.0, 1.0), dims, jac=jac)


def scaled_random(rng, shape, norm):
    m = rng.standard_normal(shape)
    return m * (norm / np.linalg.norm(m, 2)) if norm > 0 else np.zeros(shape)


def test_max_lipschitz_examples():
    c = ab_from_max_lipschitz(0.5, 0.0, 0.0, 0.5)
    assert (c.alpha, c.beta, c.lambda_cs, c.lambda_u) == (0.0, 0.0, 0.5, 0.5)
    c = ab_from_max_lipschitz(0.5, 0.1, 0.1, 0.5)
    assert c.notes["sharpened"] and c.notes["c"] == pytest.approx(0.25)
    assert c.alpha == pytest.approx(0.1 / 0.25) and c.alpha_prime == pytest.approx(0.1)
    assert c.beta == pytest.approx(0.1 / 0.25) and c.beta_prime == pytest.approx(0.1)
    with pytest.raises(ValueError, match="alpha\\*beta >= 1"):
        ab_from_max_lipschitz(0.5, 2.0, 1.0, 0.5)


def test_additive_closed_form():
    c = ab_from_additive_lipschitz(0.1, 0.1, 0.5, 0.5, c=1.0)
    # closed form evaluated independently
    b = 1.0 - 0.25 + 0.01
    alpha = (b - math.sqrt(b * b - 4 * 0.01)) / (2 * 0.1)
    assert c.alpha == pytest.approx(alpha, rel=1e-12)
    assert c.beta == pytest.approx(alpha, rel=1e-12)
    assert c.lambda_cs == pytest.approx(0.5 / (1 - alpha * 0.1), rel=1e-12)
    assert c.alpha * c.beta < 1 and c.lambda_cs * c.lambda_u < 1


def test_additive_narrowed_cones_hold_on_linear_model(rng):
    # c < 1: opening is the smaller root of c*beta~*a^2 - b*a + alpha~ = 0
    c = ab_from_additive_lipschitz(0.1, 0.1, 0.4, 0.5, c=0.8)
    b = 0.8 - 0.2 + 0.01
    root = min(np.roots([0.8 * 0.1, -b, 0.1]))
    assert c.alpha == pytest.approx(root, rel=1e-12) and c.alpha_prime == pytest.approx(0.8 * root, rel=1e-12)
    rep = check_ab_empirical(linear_model(0.4, 0.1, 0.1, 0.5), c, rng=rng)
    assert rep.passed, rep.violated_pairs[:1]


def test_additive_zero_coupling_limit():
    c = ab_from_additive_lipschitz(1e-300, 0.0, 0.5, 0.5, c=1.0)
    assert c.beta == 0.0
    assert c.alpha == pytest.approx(1e-300 / (1 - 0.25), rel=1e-12)  # c * alpha~ / b
    c0 = ab_from_additive_lipschitz(0.0, 0.0, 0.5, 0.5)
    assert c0.alpha == 0.0 and c0.lambda_u == 0.5


def test_additive_precondition_errors():
    with pytest.raises(ValueError, match="alpha~\\*beta~"):
        ab_from_additive_lipschitz(0.5, 0.5, 0.5, 0.5)
    with pytest.raises(ValueError, match="lambda_s~\\*lambda_u~"):
        ab_from_additive_lipschitz(0.0, 0.0, 1.0, 1.0)


def test_additive_constants_pass_exhaustive_linear_check(rng):
    c = ab_from_additive_lipschitz(0.1, 0.1, 0.5, 0.5)
    h = linear_model(0.5, 0.1, 0.1, 0.5)
    assert check_ab_empirical(h, c, rng=rng).passed


def test_empirical_diagonal_pair(rng):
    h = linear_model(0.5, 0.0, 0.0, 0.5)
    rep = check_ab_empirical(h, ABConstants(0.0, 0.0, 0.0, 0.0, 0.5, 0.5), rng=rng)
    assert rep.passed and rep.violated_pairs == []
    assert rep.predicate_values["pairs"] == 10_000


def test_empirical_shear_detects_zero_cones(rng):
    h = linear_model(0.5, 0.1, 0.1, 0.5)
    bad = check_ab_empirical(h, ABConstants(0.0, 0.0, 0.0, 0.0, 0.5, 0.5), rng=rng)
    assert not bad.passed and bad.violated_pairs
    good = check_ab_empirical(h, ab_from_additive_lipschitz(0.1, 0.1, 0.5, 0.5), rng=rng)
    assert good.passed


def test_empirical_needs_enough_pairs():
    with pytest.raises(ValueError):
        check_ab_empirical(linear_model(0.5, 0, 0, 0.5), ABConstants(0, 0, 0, 0, 0.5, 0.5), n_pairs=100)


def test_cone_linearized_examples(rng):
    h = linear_model(0.5, 0.0, 0.0, 0.5)
    pts = (np.zeros((3, 1)), np.zeros((3, 1)))
    assert check_cone_linearized(h, ABConstants(0.0, 0.0, 0.0, 0.0, 0.5, 0.5), pts, rng=rng).passed
    shear = linear_model(0.5, 0.1, 0.1, 0.5)
    c = ab_from_additive_lipschitz(0.1, 0.1, 0.5, 0.5)
    assert check_cone_linearized(shear, c, pts, rng=rng).passed
    inflated = ABConstants(5.0, c.alpha_prime, c.beta, c.beta_prime, c.lambda_cs, c.lambda_u)
    rep = check_cone_linearized(shear, inflated, pts, rng=rng)
    assert not rep.passed and rep.violated_pairs[0]["condition"] in ("A1", "A2")


def test_cone_linearized_quadratic_from_map(rng):
    h = from_map(lambda p: np.hstack([0.5 * p[:, :1] + 0.1 * p[:, 1:] ** 2, 2 * p[:, 1:] + 0.1 * p[:, :1] ** 2]),
                 (1, 1), 0.3)
    mc = h.info["map_constants"]
    pts = (rng.uniform(-0.3, 0.3, (20, 1)), rng.uniform(-0.3, 0.3, (20, 1)))
    alpha = 2 * (mc["eps"] + mc["xi0"])
    c = ABConstants(alpha, alpha, 1.0, 1.0, 1.0, 1.0)
    rep = check_cone_linearized(h, c, pts, rng=rng)
    assert not [v for v in rep.violated_pairs if v["condition"] == "A1"]


def test_predicate_examples():
    ok = check_hyperbolicity_predicates(ABConstants(0.0, 0.0, 1.0, 0.0, 0.5, 0.5))
    assert ok.passed and ok.predicate_values["theta"]["value"] == 1.0
    c = ABConstants(0.2, 0.2, 1.0, 0.2, 0.5, 0.9, varsigma0=2.0, case="A_prime")
    rep = check_hyperbolicity_predicates(c)
    assert rep.passed
    assert rep.predicate_values["angle_alpha_beta"]["lhs"] == pytest.approx(0.04)
    assert rep.predicate_values["theta"]["value"] == pytest.approx(1 / (1 - 2 * 0.04))
    assert rep.predicate_values["spectral"]["lhs"] == pytest.approx(0.9 / 0.92)
    gap = check_hyperbolicity_predicates(ABConstants(0.0, 0.0, 1.0, 0.0, 1.3, 0.8), "smooth")
    assert not gap.passed
    assert [v["predicate"] for v in gap.violated_pairs] == ["spectral_gap"]
    assert gap.predicate_values["spectral_gap"]["lhs"] == pytest.approx(1.04)


def test_predicates_trichotomy_needs_cu():
    with pytest.raises(ValueError):
        check_hyperbolicity_predicates(ABConstants(0, 0, 0, 0, 0.5, 0.5), "trichotomy")


def test_report_json_round_trip():
    rep = check_hyperbolicity_predicates(ABConstants(0.1, 0.1, 1.0, 0.1, 0.5, 0.5))
    d = json.loads(rep.to_json())
    assert d["passed"] == rep.passed
    assert set(d) == {"passed", "violated_pairs", "measured_constants", "predicate_values"}


def test_lipschitz_estimator_examples():
    e = estimate_lipschitz_constants(lambda p: 0.5 * p, (np.zeros(2), 1.0))
    assert float(e) == pytest.approx(0.5, abs=1e-12)
    s = estimate_lipschitz_constants(np.sin, (np.zeros(1), 1.0))
    assert math.cos(1.0) <= float(s) <= 1.0
    assert float(estimate_lipschitz_constants(lambda p: np.ones_like(p), (np.zeros(1), 1.0))) == 0.0
    a = estimate_lipschitz_constants(np.sin, (np.zeros(1), 1.0), samples=1000)
    b = estimate_lipschitz_constants(np.sin, (np.zeros(1), 1.0), samples=3000)
    assert float(b) >= float(a)


def test_max_form_conversion():
    assert max_form_from_additive(0.5, 0.0, 0.1) == 0.5
    assert max_form_from_additive(0.5, 0.2, 0.1) == math.inf
    r = max_form_from_additive(0.5, 0.1, 0.4)
    # a|u| + b|v| <= max(r|u|, opening|v|) on a grid of (u, v)
    u, v = np.meshgrid(np.linspace(0, 1, 101), np.linspace(0, 1, 101))
    assert np.all(0.5 * u + 0.1 * v <= np.maximum(r * u, 0.4 * v) + 1e-12)


def test_derive_prefers_small_openings():
    c = derive_ab_constants(0.0, 1.0, 0.5, 0.5)
    assert check_hyperbolicity_predicates(c).passed
    assert c.beta_prime < 5.0


def test_projection_perturbation_stability(rng):
    # measured constants on a linear family degrade by at most 10% under 0.01 splitting perturbations
    a = np.diag([0.5, 2.0])
    for _ in range(5):
        e = scaled_random(rng, (2, 2), 0.01)
        m = np.eye(2) + e
        t = np.linalg.inv(m) @ a @ m
        h = from_map(lambda p: p @ t.T, (1, 1), 0.5)
        ref = from_map(lambda p: p @ a.T, (1, 1), 0.5)
        d_pert = estimate_lipschitz_constants(lambda x: h.pair.evaluate(x[:, :1], x[:, 1:])[0], (np.zeros(2), 0.5))
        d_ref = estimate_lipschitz_constants(lambda x: ref.pair.evaluate(x[:, :1], x[:, 1:])[0], (np.zeros(2), 0.5))
        assert float(d_pert) <= 1.1 * float(d_ref)
