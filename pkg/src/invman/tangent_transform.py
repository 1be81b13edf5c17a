"""Derivative fields of invariant sections via the linearized graph transform."""
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .atlas import GraphSection, multilinear
from .conditions import _jsonable
from .correspondence import HypothesisError
from .graph_transform import NOISE_FLOOR, bump, bump_gradient, solve_cs_fixed_point


@dataclass
class TangentSection:
    """Linear maps ``K[b, node]`` of shape ``(du, dx)`` with ``dx = base + center + stable``."""

    atlas: object
    grid: object
    values: np.ndarray
    mu1: float = math.inf
    meta: dict = field(default_factory=dict)
    order: int = 1

    @property
    def shape(self):
        return self.values.shape[2:]

    @classmethod
    def zeros(cls, atlas, grid, du, mu1=math.inf, order=1):
        dx = atlas.base_dim + grid.dim
        return cls(atlas, grid, np.zeros((atlas.n_samples, grid.size, du, dx)), mu1, order=order)

    def with_values(self, values):
        return TangentSection(self.atlas, self.grid, values, self.mu1, dict(self.meta), self.order)

    def evaluate(self, points):
        du, dx = self.shape
        flat = self.values.reshape(self.values.shape[0], self.values.shape[1], du * dx)
        sec = GraphSection(self.atlas, self.grid, flat, order=self.order)
        return sec.evaluate(points).reshape(-1, du, dx)

    def node_points(self):
        return GraphSection(self.atlas, self.grid, np.zeros(self.values.shape[:2] + (1,))).node_points()

    def sup_norm(self):
        return float(np.linalg.norm(self.values, 2, axis=(2, 3)).max(initial=0.0))

    def to_csv(self):
        du, dx = self.shape
        db = self.atlas.base_dim
        dc = self.grid.center_dim
        header = ([f"p{i}" for i in range(db)] + [f"c{i}" for i in range(dc)]
                  + [f"s{i}" for i in range(self.grid.dim - dc)]
                  + [f"K{i}_{j}" for i in range(du) for j in range(dx)])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for p, k in zip(self.node_points(), self.values.reshape(-1, du * dx)):
            w.writerow(["%.17g" % v for v in p] + ["%.17g" % v for v in k])
        return buf.getvalue()


def truncation_derivative(problem, cfg, points, u):
    """Derivatives of the truncation pair ``F1(x, u) = x``, ``G1(x, u) = Psi(x) u``.

    Returns ``(DF1, DG1)`` with columns ordered ``(x, u)``.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    n, dx = x.shape
    du = u.shape[1]
    psi = bump(x, cfg, problem.base_dim, problem.center_dim)
    grad = bump_gradient(x, cfg, problem.base_dim, problem.center_dim)
    df1 = np.concatenate([np.broadcast_to(np.eye(dx), (n, dx, dx)), np.zeros((n, dx, du))], axis=2)
    dg1 = np.concatenate([np.einsum("ni,nj->nij", u, grad), psi[:, None, None] * np.eye(du)], axis=2)
    return df1, dg1


def _tangent_update(K, h0, problem, cfg, x):
    xp, z, _ = solve_cs_fixed_point(problem.F, h0.evaluate, x, cfg.tol_fixed_point)
    df, dg = problem.pair.jacobians(x, z)
    dx = x.shape[1]
    fx, fz = df[:, :, :dx], df[:, :, dx:]
    gx, gz = dg[:, :, :dx], dg[:, :, dx:]
    kp = K.evaluate(xp)
    eye = np.eye(dx)
    lhs = eye - fz @ kp
    try:
        r = np.linalg.solve(lhs, fx)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(lhs)
        raise HypothesisError(f"tangent fixed point singular at node {int(np.argmax(cond))}") from exc
    kt = gx + gz @ kp @ r
    ht = problem.G(x, z)
    _, dg1 = truncation_derivative(problem, cfg, x, ht)
    # chain rule through G1(x, h~(x)) = Psi(x) h~(x)
    return dg1[:, :, :dx] + dg1[:, :, dx:] @ kt, r


def transform_tangent_once(K, h0, problem, cfg):
    x = K.node_points()
    kn, _ = _tangent_update(K, h0, problem, cfg, x)
    return K.with_values(kn.reshape(K.values.shape))


def fd_section_derivative(h):
    """Finite-difference derivative of a section on its grid, shape ``(B, N, du, dx)``."""
    atlas, grid = h.atlas, h.grid
    du = h.du
    if atlas.interpolation == "periodic":
        full = tuple(atlas.shape) + tuple(grid.shape)
        v = h.values.reshape(full + (du,))
        grads = []
        for a, n in enumerate(atlas.shape):
            step = atlas.period / n
            grads.append((np.roll(v, -1, axis=a) - np.roll(v, 1, axis=a)) / (2 * step))
        offset = len(atlas.shape)
    else:
        full = (atlas.n_samples,) + tuple(grid.shape)
        v = h.values.reshape(full + (du,))
        grads = []
        offset = 1
    for a, ax in enumerate(grid.axes()):
        if ax.size < 3:
            grads.append(np.zeros_like(v))
            continue
        grads.append(np.gradient(v, ax, axis=offset + a, edge_order=2))
    g = np.stack(grads, axis=-1)
    return g.reshape(h.values.shape[:2] + (du, len(grads)))


def _tangent_distance(a, b):
    return float(np.linalg.norm(a.values - b.values, 2, axis=(2, 3)).max(initial=0.0))


def iterate_tangent(problem, h0, cfg, K_init=None, tol=1e-10, max_sweeps=300):
    """Fixed point of the linearized transform, with a finite-difference check against ``h0``."""
    mu1 = math.inf
    if problem.constants is not None:
        mu1 = float(np.max(problem.constants.beta_prime)) * 1.05 + 0.05
    K = K_init if K_init is not None else TangentSection.zeros(problem.atlas, h0.grid, problem.unstable_dim, mu1,
                                                                h0.order)
    changes, ratios = [], []
    for _ in range(max_sweeps):
        Kn = transform_tangent_once(K, h0, problem, cfg)
        d = _tangent_distance(Kn, K)
        if changes and changes[-1] > NOISE_FLOOR:
            ratios.append(d / changes[-1])
        changes.append(d)
        K = Kn
        if d <= tol:
            break
    fd = fd_section_derivative(h0)
    fd_err = float(np.abs(K.values - fd).max(initial=0.0))
    report = {"sweeps": len(changes), "final_change": changes[-1], "ratios": ratios,
              "fd_error": fd_err, "fd_tolerance": max(1e-4, 10 * h0.grid.spacing ** 2),
              "sup_norm": K.sup_norm(), "mu1": mu1, "norm_bound_ok": K.sup_norm() <= mu1}
    return K, _jsonable(report)


def tangent_contraction(problem, h0, cfg, trials=3, scale=0.1, seed=0):
    """Max ratio ``d(Gamma0 K1, Gamma0 K2) / d(K1, K2)`` over random tangent fields."""
    rng = np.random.default_rng(seed)
    base = TangentSection.zeros(problem.atlas, h0.grid, problem.unstable_dim, order=h0.order)
    best = 0.0
    for _ in range(trials):
        k1 = base.with_values(rng.uniform(-scale, scale, base.values.shape))
        k2 = base.with_values(rng.uniform(-scale, scale, base.values.shape))
        d0 = _tangent_distance(k1, k2)
        d1 = _tangent_distance(transform_tangent_once(k1, h0, problem, cfg),
                               transform_tangent_once(k2, h0, problem, cfg))
        best = max(best, d1 / d0)
    return best


def tangent_at_base(problem, cfg, tol=1e-14, max_iter=1000):
    """Derivative of the invariant section at the base samples (fiber origin).

    Iterates ``K(m) = G_x + G_z K(u(m)) R``, ``R = (I - F_z K(u(m)))^-1 F_x``.
    """
    if problem.eta != 0:
        raise ValueError("tangent at the base needs an invariant base set (eta = 0)")
    atlas = problem.atlas
    db, df_, du = problem.base_dim, problem.fiber_dim, problem.unstable_dim
    dx = db + df_
    x = np.hstack([atlas.params, np.zeros((atlas.n_samples, df_))])
    z0 = np.zeros((atlas.n_samples, du))
    xp = problem.F(x, z0)
    jf, jg = problem.pair.jacobians(x, z0)
    fx, fz, gx, gz = jf[:, :, :dx], jf[:, :, dx:], jg[:, :, :dx], jg[:, :, dx:]
    K = np.zeros((atlas.n_samples, du, dx))
    eye = np.eye(dx)

    def at_image(K):
        if atlas.interpolation == "periodic":
            v = K.reshape(tuple(atlas.shape) + (du * dx,))
            return multilinear(v, atlas.axes(), [True] * db, [atlas.period] * db, xp[:, :db]).reshape(-1, du, dx)
        idx = atlas.image_index()
        return K[idx]

    for it in range(max_iter):
        kp = at_image(K)
        r = np.linalg.solve(eye - fz @ kp, fx)
        kn = gx + gz @ kp @ r
        d = float(np.abs(kn - K).max(initial=0.0))
        K = kn
        if d <= tol:
            break
    return K


def hoelder_estimate(K, theta=1.0):
    """Sampled Hoelder-``theta`` constant of the tangent field over neighbouring nodes."""
    atlas, grid = K.atlas, K.grid
    du, dx = K.shape
    if atlas.interpolation == "periodic":
        full = tuple(atlas.shape) + tuple(grid.shape)
        steps = [atlas.period / n for n in atlas.shape]
        periodic = [True] * len(atlas.shape)
    else:
        full = (atlas.n_samples,) + tuple(grid.shape)
        steps = [math.inf]
        periodic = [False]
    v = K.values.reshape(full + (du, dx))
    steps += [(a[1] - a[0]) if a.size > 1 else math.inf for a in grid.axes()]
    periodic += [False] * grid.dim
    best = 0.0
    for axis, (h, per) in enumerate(zip(steps, periodic)):
        if not np.isfinite(h) or v.shape[axis] < 2:
            continue
        if per:
            d = np.roll(v, -1, axis=axis) - v
        else:
            d = np.diff(v, axis=axis)
        nrm = np.linalg.norm(d, 2, axis=(-2, -1))
        best = max(best, float(nrm.max() / h ** theta))
    return best
