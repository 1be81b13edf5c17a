"""Correspondences given by generating pairs.

A pair ``(F, G)`` encodes the relation ``(x2, y2) in H(x1, y1)`` iff
``y1 = G(x1, y2)`` and ``x2 = F(x1, y2)``.  All callables act on batches:
``x`` has shape ``(n, dim_x)`` and ``z`` has shape ``(n, dim_z)``.
"""
from dataclasses import dataclass, field

import numpy as np


class HypothesisError(ValueError):
    """A hyperbolicity or smallness hypothesis failed."""


def as_batch(v, dim):
    v = np.asarray(v, dtype=float)
    if v.ndim == 1 and dim is not None and v.shape[0] == dim:
        v = v[None, :]
    elif v.ndim == 0:
        v = v.reshape(1, 1)
    elif v.ndim == 1:
        v = v[:, None]
    return v


def fd_jacobian(fun, p, step=1e-6):
    """Central-difference Jacobian of a batched map ``fun: (n, d) -> (n, k)``."""
    p = np.asarray(p, dtype=float)
    n, d = p.shape
    h = step * (1.0 + np.abs(p))
    cols = []
    for j in range(d):
        e = np.zeros_like(p)
        e[:, j] = h[:, j]
        cols.append((fun(p + e) - fun(p - e)) / (2.0 * h[:, j:j + 1]))
    return np.stack(cols, axis=-1)


@dataclass
class GeneratingPair:
    F: object
    G: object
    dims: tuple
    dom_x_radius: float = np.inf
    dom_z_radius: float = np.inf
    jac: object = None  # optional (x, z) -> (DF, DG), each (n, k, dim_x + dim_z)
    joint: object = None  # optional (x, z) -> (F, G) sharing work

    def __post_init__(self):
        self.dims = (int(self.dims[0]), int(self.dims[1]))

    def evaluate(self, x, z):
        dx, dz = self.dims
        x, z = as_batch(x, dx), as_batch(z, dz)
        if self.joint is not None:
            f, g = self.joint(x, z)
        else:
            f, g = self.F(x, z), self.G(x, z)
        return np.asarray(f, dtype=float), np.asarray(g, dtype=float)

    def jacobians(self, x, z):
        dx, dz = self.dims
        x, z = as_batch(x, dx), as_batch(z, dz)
        if self.jac is not None:
            return self.jac(x, z)

        def both(p):
            f, g = self.evaluate(p[:, :dx], p[:, dx:])
            return np.hstack([f, g])

        jj = fd_jacobian(both, np.hstack([x, z]))
        return jj[:, :dx, :], jj[:, dx:, :]


@dataclass
class CorrespondenceHandle:
    pair: GeneratingPair
    label: str = ""
    info: dict = field(default_factory=dict)
    source_splitting: object = None
    target_splitting: object = None

    @property
    def dims(self):
        return self.pair.dims

    def F(self, x, z):
        return self.pair.evaluate(x, z)[0]

    def G(self, x, z):
        return self.pair.evaluate(x, z)[1]

    def graph_point(self, x1, y2):
        """The graph point ``(x1, y1, x2, y2)`` generated by ``(x1, y2)``."""
        x2, y1 = self.pair.evaluate(x1, y2)
        return as_batch(x1, self.dims[0]), y1, x2, as_batch(y2, self.dims[1])

    def membership_residual(self, x1, y1, x2, y2):
        f, g = self.pair.evaluate(x1, y2)
        y1 = as_batch(y1, self.dims[1])
        x2 = as_batch(x2, self.dims[0])
        return np.maximum(np.linalg.norm(f - x2, axis=1), np.linalg.norm(g - y1, axis=1))


def from_generating_maps(F, G, radii, dims, jac=None, label=""):
    rx, rz = radii if np.ndim(radii) else (radii, radii)
    if not (rx > 0 and rz > 0):
        raise ValueError("domain radii must be positive")
    return CorrespondenceHandle(GeneratingPair(F, G, dims, rx, rz, jac), label=label)


def _splitting_matrix(splitting, n):
    """Columns spanning cs then u, and their dimensions."""
    if isinstance(splitting, (tuple, list)) and len(splitting) == 2 and np.ndim(splitting[0]) == 0:
        d_cs, d_u = int(splitting[0]), int(splitting[1])
        if d_cs + d_u != n:
            raise ValueError("splitting dimensions do not add up")
        return np.eye(n), d_cs, d_u
    b_cs, b_u = (np.atleast_2d(np.asarray(b, dtype=float)) for b in splitting)
    if b_cs.shape[0] != n:
        b_cs = b_cs.T
    if b_u.shape[0] != n:
        b_u = b_u.T
    m = np.hstack([b_cs, b_u])
    if m.shape != (n, n) or np.linalg.matrix_rank(m) < n:
        raise ValueError("splitting is not complementary")
    return m, b_cs.shape[1], b_u.shape[1]


def from_map(h, splitting, ball_radius, base_point=None, target_point=None, jac=None,
             n_check=256, rng=None, newton_tol=1e-12, max_newton=60, label=""):
    """Generating pair of the map ``h`` near ``base_point``.

    ``splitting`` is either ``(dim_cs, dim_u)`` for the coordinate split or
    a pair of bases ``(B_cs, B_u)``.  Local coordinates are taken relative to
    ``base_point`` at the source and ``target_point`` (default ``h(base_point)``)
    at the target.  ``G`` solves ``g(x, G) = z`` by Newton's method and
    ``F = f(x, G)``.
    """
    base = None if base_point is None else np.asarray(base_point, dtype=float)
    n = None
    if base is not None:
        n = base.shape[0]
    else:
        if isinstance(splitting, (tuple, list)) and np.ndim(splitting[0]) == 0:
            n = int(splitting[0]) + int(splitting[1])
        else:
            n = np.atleast_2d(splitting[0]).shape[0]
        base = np.zeros(n)
    m, d_cs, d_u = _splitting_matrix(splitting, n)
    m_inv = np.linalg.inv(m)
    h_b = lambda p: np.asarray(h(p), dtype=float)
    target = h_b(base[None, :])[0] if target_point is None else np.asarray(target_point, dtype=float)

    def ambient(x, y):
        return base + np.hstack([x, y]) @ m.T

    def local(w):
        return (w - target) @ m_inv.T

    def dh_local(x, y):
        p = ambient(x, y)
        dh = jac(p) if jac is not None else fd_jacobian(h_b, p)
        return np.einsum("ij,njk,kl->nil", m_inv, dh, m)

    def f_g(x, y):
        w = local(h_b(ambient(x, y)))
        return w[:, :d_cs], w[:, d_cs:]

    def solve_G(x, z):
        # Newton on g(x, y) = z, started from the linearization at the origin
        a0 = dh_local(np.zeros((1, d_cs)), np.zeros((1, d_u)))[0]
        guu0 = a0[d_cs:, d_cs:]
        g0 = f_g(x, np.zeros((x.shape[0], d_u)))[1]
        y = np.linalg.solve(guu0, (z - g0).T).T
        for _ in range(max_newton):
            r = f_g(x, y)[1] - z
            if np.max(np.abs(r), initial=0.0) <= newton_tol:
                return y
            j = dh_local(x, y)[:, d_cs:, d_cs:]
            try:
                y = y - np.linalg.solve(j, r[..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise HypothesisError("u-block not invertible on ball") from exc
        r = f_g(x, y)[1] - z
        if np.max(np.abs(r), initial=0.0) > 1e3 * newton_tol:
            raise HypothesisError("u-block not invertible on ball: Newton did not converge")
        return y

    def F(x, z):
        return f_g(x, solve_G(x, z))[0]

    def G(x, z):
        return solve_G(x, z)

    def joint(x, z):
        y = solve_G(x, z)
        return f_g(x, y)[0], y

    def pair_jac(x, z):
        y = solve_G(x, z)
        a = dh_local(x, y)
        fx, fy = a[:, :d_cs, :d_cs], a[:, :d_cs, d_cs:]
        gx, gy = a[:, d_cs:, :d_cs], a[:, d_cs:, d_cs:]
        gy_inv = np.linalg.inv(gy)
        dgx = -gy_inv @ gx
        dgz = gy_inv
        dfx = fx + fy @ dgx
        dfz = fy @ dgz
        return np.concatenate([dfx, dfz], axis=2), np.concatenate([dgx, dgz], axis=2)

    constants = map_pair_constants(dh_local, d_cs, d_u, ball_radius, n_check, rng)
    eta_star = float(np.linalg.norm(h_b(base[None, :])[0] - target))
    constants["eta_star"] = eta_star
    constants["C1_eta_bound_G00"] = 2.0 * constants["C1"] * eta_star
    constants["F00_bound"] = (2.0 * constants["C1"] + constants["eps"] + constants["xi0"]) * eta_star
    pair = GeneratingPair(F, G, (d_cs, d_u), ball_radius, ball_radius, pair_jac, joint)
    split = (m[:, :d_cs], m[:, d_cs:])
    return CorrespondenceHandle(pair, label=label, info={"map_constants": constants},
                                source_splitting=split, target_splitting=split)


def map_pair_constants(dh_local, d_cs, d_u, radius, n_check=256, rng=None):
    """Smallness constants of a map near a point, with the resulting pair bounds.

    Samples the local Jacobian on the ball of ``radius`` and raises
    ``HypothesisError`` naming the failing inequality when the unstable
    block cannot be inverted uniformly or the linear rates are not
    hyperbolic.
    """
    rng = np.random.default_rng(12345) if rng is None else rng
    n = d_cs + d_u
    pts = rng.uniform(-1.0, 1.0, size=(n_check, n))
    pts *= radius / np.maximum(1.0, np.linalg.norm(pts, axis=1, keepdims=True) / 1.0)
    pts = np.vstack([np.zeros((1, n)), pts])
    a = dh_local(pts[:, :d_cs], pts[:, d_cs:])
    a0 = a[0]
    guu = a0[d_cs:, d_cs:]
    if np.linalg.svd(guu, compute_uv=False)[-1] <= 1e-12 * max(1.0, np.abs(guu).max()):
        raise HypothesisError("u-block not invertible on ball: D_y g(0) is singular")
    lam_u = float(np.linalg.norm(np.linalg.inv(guu), 2))
    lam_cs = float(np.linalg.norm(a0[:d_cs, :d_cs], 2)) if d_cs else 0.0
    xi0 = max(float(np.linalg.norm(a0[:d_cs, d_cs:], 2)) if d_cs else 0.0,
              float(np.linalg.norm(a0[d_cs:, :d_cs], 2)) if d_cs else 0.0)
    diffs = np.linalg.norm(a - a0, ord=2, axis=(1, 2))
    a_osc = 2.0 * float(diffs.max())
    c1 = 1.0  # coordinate projections of the adapted splitting
    eps = c1 * a_osc
    # uniform invertibility of the u-block over the ball (Neumann-series perturbation bound)
    u_osc = float(np.linalg.norm(a[:, d_cs:, d_cs:] - guu, ord=2, axis=(1, 2)).max())
    if lam_u * u_osc > 0.5:
        raise HypothesisError(
            f"u-block not invertible on ball: |(D_y g)^-1| * osc(D_y g) = {lam_u * u_osc:.3g} > 1/2")
    if not lam_u < 1.0:
        raise HypothesisError(f"hyperbolicity hypotheses violated: lambda_u = {lam_u:.6g} < 1 fails")
    if not lam_cs * lam_u < 1.0:
        raise HypothesisError(
            f"hyperbolicity hypotheses violated: lambda_cs * lambda_u = {lam_cs * lam_u:.6g} < 1 fails")
    return {
        "C1": c1, "A_osc": a_osc, "eps": eps, "eps_small": bool(eps <= 0.25),
        "xi0": xi0, "lambda_cs_lin": lam_cs, "lambda_u_lin": lam_u,
        "lipG_x_bound": 2.0 * (eps + xi0),
        "lipG_z_bound": (eps + lam_u) / (1.0 - eps) if eps < 1 else np.inf,
        "lipF_x_bound": eps + lam_cs + 4.0 * (eps + xi0) ** 2,
        "lipF_z_bound": 5.0 * (eps + xi0),
        "gamma0": 2.0 * (eps + xi0),
    }


def _inner_fixed_point(step, y0, tol=1e-13, max_iter=200):
    y = y0
    for _ in range(max_iter):
        y_new = step(y)
        if np.max(np.abs(y_new - y), initial=0.0) <= tol * (1.0 + np.max(np.abs(y_new), initial=0.0)):
            return y_new
        y = y_new
    raise HypothesisError("composition fixed point did not converge")


def compose(h2, h1, n_check=512, rng=None, radius=None):
    """Generating pair of ``H2 o H1``.

    The middle unstable coordinate solves ``y = G2(F1(x1, y), y3)``, which
    contracts when ``Lip G2(., y) * Lip F1(x, .) < 1``; that product is
    checked by sampling first.
    """
    if h1.dims != h2.dims:
        raise ValueError("dimension mismatch in composition")
    dx, dz = h1.dims
    rng = np.random.default_rng(7) if rng is None else rng
    r = min(h1.pair.dom_x_radius, h1.pair.dom_z_radius, 1.0) if radius is None else radius
    xs = rng.uniform(-r, r, size=(n_check, dx))
    zs = rng.uniform(-r, r, size=(n_check, dz))
    dfz = h1.pair.jacobians(xs, zs)[0][:, :, dx:]
    dgx = h2.pair.jacobians(xs, zs)[1][:, :, :dx]
    prod = float(np.linalg.norm(dgx, 2, axis=(1, 2)).max() * np.linalg.norm(dfz, 2, axis=(1, 2)).max())
    if not prod < 1.0:
        raise HypothesisError(
            f"composition not well posed on these radii: Lip G2(.,y) * Lip F1(x,.) = {prod:.3g} >= 1")

    def middle(x1, y3):
        x1, y3 = as_batch(x1, dx), as_batch(y3, dz)
        step = lambda y: h2.G(h1.F(x1, y), y3)
        return _inner_fixed_point(step, np.zeros_like(y3))

    def F(x1, y3):
        y2 = middle(x1, y3)
        return h2.F(h1.F(x1, y2), y3)

    def G(x1, y3):
        return h1.G(x1, middle(x1, y3))

    rx = min(h1.pair.dom_x_radius, h2.pair.dom_x_radius)
    rz = min(h1.pair.dom_z_radius, h2.pair.dom_z_radius)
    out = from_generating_maps(F, G, (rx, rz), (dx, dz), label=f"{h2.label}*{h1.label}")
    out.info["contraction_product"] = prod
    return out


def dual(h):
    """Role-swapped correspondence: ``F~(a, b) = G(b, a)``, ``G~(a, b) = F(b, a)``."""
    dx, dz = h.dims
    pair = h.pair

    def F(a, b):
        return pair.evaluate(b, a)[1]

    def G(a, b):
        return pair.evaluate(b, a)[0]

    jac = None
    if pair.jac is not None:
        def jac(a, b):
            df, dg = pair.jac(b, a)
            # reorder columns from (x, z) = (b, a) to (a, b)
            swap = lambda m: np.concatenate([m[:, :, dx:], m[:, :, :dx]], axis=2)
            return swap(dg), swap(df)

    def joint(a, b):
        f, g = pair.evaluate(b, a)
        return g, f

    out = CorrespondenceHandle(
        GeneratingPair(F, G, (dz, dx), pair.dom_z_radius, pair.dom_x_radius, jac, joint),
        label=f"dual({h.label})", info=dict(h.info))
    out.info["dual_of"] = h.label
    return out


def shift(h, m, m_target):
    """Pair of ``H(m + .) - m_target`` in the coordinates of ``h``.

    ``m`` and ``m_target`` are given as ``(x, y)`` coordinate pairs.
    """
    dx, dz = h.dims
    mx, my = (np.asarray(v, dtype=float).reshape(-1) for v in m)
    tx, ty = (np.asarray(v, dtype=float).reshape(-1) for v in m_target)
    pair = h.pair

    def F(x, z):
        return pair.evaluate(x + mx, z + ty)[0] - tx

    def G(x, z):
        return pair.evaluate(x + mx, z + ty)[1] - my

    def joint(x, z):
        f, g = pair.evaluate(x + mx, z + ty)
        return f - tx, g - my

    jac = None
    if pair.jac is not None:
        jac = lambda x, z: pair.jac(x + mx, z + ty)
    out = CorrespondenceHandle(
        GeneratingPair(F, G, (dx, dz), pair.dom_x_radius, pair.dom_z_radius, jac, joint),
        label=f"shift({h.label})", info=dict(h.info))
    f0, g0 = out.pair.evaluate(np.zeros((1, dx)), np.zeros((1, dz)))
    out.info["defect"] = max(float(np.linalg.norm(f0)), float(np.linalg.norm(g0)))
    return out
