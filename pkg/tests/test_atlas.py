import math

import numpy as np
import pytest

from invman.atlas import (FiberGrid, GraphSection, assemble_section, build_base_sample, coordinate_change_constant,
                          local_representation, mu_lip_check, multilinear, pretangent_defect, tensor_cubic,
                          tube_map_lipschitz, tubular_coords, tubular_coords_inverse)

EYE3 = np.eye(3)
COORD_SPLIT = (np.diag([0.0, 1.0, 0.0]), np.diag([1.0, 0.0, 0.0]), np.diag([0.0, 0.0, 1.0]))  # (s, c, u)


@pytest.fixture(scope="module")
def circle():
    return build_base_sample("circle", {"n": 256, "omega": 0.3, "stable_normal": "binormal"})


def frames_for(b):
    return (EYE3[:, :1], EYE3[:, 1:2], EYE3[:, 2:])


def test_tubular_round_trip(circle, rng):
    idx = 17
    xc = rng.uniform(-0.05, 0.05, (100, 1))
    ys, yu = rng.uniform(-0.05, 0.05, (100, 1)), rng.uniform(-0.05, 0.05, (100, 1))
    z = tubular_coords_inverse(circle, idx, xc, ys, yu)
    back = tubular_coords(circle, idx, z)
    err = max(np.abs(a - b).max() for a, b in zip(back, (xc, ys, yu)))
    assert err <= 1e-9


def test_tubular_out_of_reach(circle):
    p0 = circle.embedding(circle.params[:1])
    with pytest.raises(ValueError, match="outside chart reach"):
        tubular_coords(circle, 0, -p0)


def test_tube_map_close_to_identity(circle):
    assert tube_map_lipschitz(circle, 0, 0.05) <= 0.1


def test_coordinate_change_constant_small(circle):
    assert coordinate_change_constant(circle, 0, 0.05) < 0.25


def test_mu_lip_examples(rng):
    on_s = np.column_stack([np.zeros(30), rng.standard_normal(30), np.zeros(30)])
    assert mu_lip_check(on_s, COORD_SPLIT, 0.0).passed
    cs = rng.standard_normal((40, 2))
    graph = np.column_stack([cs, 0.3 * cs[:, 0]])  # u = L(c, s) with |L| = 0.3
    assert mu_lip_check(graph, COORD_SPLIT, 0.3 + 1e-9).passed
    assert not mu_lip_check(graph, COORD_SPLIT, 0.29).passed
    tilted = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 0.1]])
    rep = mu_lip_check(tilted, COORD_SPLIT, 0.5)
    assert not rep.passed
    assert {(w["i"], w["j"]) for w in rep.violated_pairs} == {(0, 1), (1, 2)}
    with pytest.raises(ValueError):
        mu_lip_check(tilted[:1], COORD_SPLIT, 0.5)


def test_pretangent_examples(circle):
    t = np.linspace(-1, 1, 41)
    seg = build_base_sample("sampled_set", {"points": np.column_stack([t, 0 * t, 0 * t]),
                                            "frames": frames_for(41)})
    assert pretangent_defect(seg, 20, 0.2) == 0.0
    # circle: sup of |sin(midpoint angle)| over sample pairs inside the chord ball of radius 0.1
    assert pretangent_defect(circle, 0, 0.1) == pytest.approx(math.sin(3.5 * 2 * math.pi / 256), rel=1e-12)
    assert pretangent_defect(circle, 0, 0.1) <= 1.0 * 0.1  # curvature * eps
    assert pretangent_defect(circle, 0, 0.05) <= pretangent_defect(circle, 0, 0.1)
    tilt = build_base_sample("sampled_set", {"points": np.column_stack([t, 0 * t, t]), "frames": frames_for(41)})
    for eps in (0.5, 0.2, 0.1):
        assert pretangent_defect(tilt, 20, eps) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    with pytest.raises(ValueError, match="insufficient"):
        pretangent_defect(seg, 20, 1e-3)


def test_build_base_sample_examples():
    pt = build_base_sample("point")
    assert pt.n_samples == 1 and pt.image_index().tolist() == [0]
    c = build_base_sample("circle", {"n": 256, "omega": 0.5})
    img = c.wrap(c.base_map(c.params))
    assert img.min() >= 0 and img.max() < 2 * math.pi
    assert img[-1, 0] == pytest.approx(c.params[-1, 0] + 0.5 - 2 * math.pi)
    tor = build_base_sample("torus_d", {"d": 2, "n": 64})
    assert tor.n_samples == 64 * 64
    assert math.isfinite(tor.checks["projection_lipschitz"]) and tor.checks["projection_lipschitz"] > 0
    assert tor.splitting.dims == (2, 2, 1)  # (s, c, u)
    with pytest.raises(ValueError):
        build_base_sample("circle", {"n": 4})
    with pytest.raises(ValueError):
        build_base_sample("sampled_set", {"points": np.zeros((2, 3)), "frames": frames_for(2)})
    with pytest.raises(ValueError):
        build_base_sample("sphere")


def test_splitting_field_sums_to_identity(circle):
    err = circle.splitting.validate()
    assert max(err.values()) <= 1e-10


def test_local_representation_flat_cases(rng):
    pt = build_base_sample("point")
    grid = FiberGrid([0.2, 0.2], 5)
    assert local_representation(GraphSection.zeros(pt, grid, 1), 0).lipschitz == 0.0
    lmat = np.array([[0.3, -0.2]])
    h = GraphSection(pt, grid, (grid.points() @ lmat.T)[None])
    lg = local_representation(h, 0)
    np.testing.assert_allclose(lg.values, lg.points() @ lmat.T, atol=1e-14)
    back = assemble_section(h, [lg])
    np.testing.assert_allclose(back.values, h.values, atol=1e-14)


def test_local_representation_circle_bending(circle):
    grid = FiberGrid([0.05], 5)
    lg = local_representation(GraphSection.zeros(circle, grid, 1), 3, radius=0.05, nodes=5)
    pts = lg.points()
    on_manifold = pts[:, 1] == 0.0
    xc = pts[on_manifold, 0]
    # flat c-coordinate sin(p), radial u-coordinate cos(p) - 1
    np.testing.assert_allclose(lg.values[on_manifold, 0], np.sqrt(1 - xc ** 2) - 1, atol=1e-10)
    # same points via tubular coordinates: zero fiber parts
    z = circle.embedding(circle.params[3:4] + np.arcsin(xc)[:, None])
    _, ys, yu = tubular_coords(circle, 3, z)
    assert np.abs(ys).max() <= 1e-12 and np.abs(yu).max() <= 1e-12


def test_mu_lip_transport(circle, rng):
    mu, idx = 0.2, 0
    chi = coordinate_change_constant(circle, idx, 0.05)
    xc, ys = rng.uniform(-0.04, 0.04, (60, 1)), rng.uniform(-0.04, 0.04, (60, 1))
    z = tubular_coords_inverse(circle, idx, xc, ys, mu * ys)
    p0 = circle.params[idx:idx + 1]
    m = np.concatenate(circle.frames(p0), axis=2)[0]
    flat = np.linalg.solve(m, (z - circle.embedding(p0)).T).T
    assert mu_lip_check(flat, COORD_SPLIT, (1 + chi) * mu + chi).passed


def test_fiber_grid_retract():
    g = FiberGrid([1.0, 0.5], 3)
    z = np.array([[2.0, 0.0], [0.2, 0.1], [1.0, 1.0]])
    r = g.retract(z)
    np.testing.assert_allclose(r, [[1.0, 0.0], [0.2, 0.1], [0.5, 0.5]])
    assert g.origin_index() == 4
    assert FiberGrid([1.0], 4).origin_index() is None


def test_interpolation_exactness(rng):
    ax = [np.linspace(-1, 1, 7), np.linspace(-1, 1, 9)]
    mesh = np.meshgrid(*ax, indexing="ij")
    pts = rng.uniform(-1, 1, (200, 2))
    lin = lambda x, y: 0.5 * x - 2 * y + 1
    quad = lambda x, y: x ** 2 - x * y + 3 * y ** 2
    v_lin = lin(*mesh)[..., None]
    v_quad = quad(*mesh)[..., None]
    args = ([False, False], [0.0, 0.0])
    np.testing.assert_allclose(multilinear(v_lin, ax, *args, pts)[:, 0], lin(*pts.T), atol=1e-13)
    np.testing.assert_allclose(tensor_cubic(v_quad, ax, *args, pts)[:, 0], quad(*pts.T), atol=1e-12)


def test_periodic_cubic_accuracy(rng):
    n = 64
    ax = [np.arange(n) * 2 * math.pi / n]
    v = np.sin(ax[0])[:, None]
    p = rng.uniform(-10, 10, (100, 1))
    out = tensor_cubic(v, ax, [True], [2 * math.pi], p)[:, 0]
    assert np.abs(out - np.sin(p[:, 0])).max() <= 1e-4


def test_section_validation_and_csv(circle):
    grid = FiberGrid([0.1], 3)
    with pytest.raises(ValueError):
        GraphSection(circle, grid, np.zeros((5, 3, 1)))
    with pytest.raises(ValueError):
        GraphSection.zeros(circle, grid, 1, order=2)
    h = GraphSection.zeros(circle, grid, 1, order=3)
    assert h.with_values(h.values + 1).order == 3
    lines = h.to_csv().splitlines()
    assert lines[0] == "p0,s0,u0" and len(lines) == 1 + 256 * 3
    assert h.metadata()["interpolation_order"] == 3
    np.testing.assert_array_equal(h.anchor_values(), 0.0)


def test_section_lipschitz_linear(circle):
    grid = FiberGrid([0.1], 5)
    pts = GraphSection.zeros(circle, grid, 1).node_points()
    h = GraphSection(circle, grid, (0.4 * pts[:, 1:]).reshape(256, 5, 1))
    assert h.lipschitz_u() == pytest.approx(0.4, rel=1e-9)
