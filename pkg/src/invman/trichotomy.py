"""Center-stable, center-unstable and center manifolds; orbit generation and classification."""
import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .atlas import FiberGrid, multilinear
from .conditions import ConditionReport, _jsonable
from .correspondence import HypothesisError
from .graph_transform import induced_forward_map, iterate, solve_cs_fixed_point


def _representation_check(h, constants, chi):
    lip = h.lipschitz_u()
    if constants is None:
        return {"lipschitz": lip}
    bound = (1 + chi) * float(np.max(constants.beta_prime)) + chi
    return {"lipschitz": lip, "bound": bound, "passed": bool(lip <= bound)}


def compute_cs(spec, cfg, chi=0.05):
    problem = spec.cs_problem()
    h, rep = iterate(problem, cfg)
    out = rep.to_dict()
    out["representation"] = _representation_check(h, problem.constants, chi)
    return h, out


def compute_cu_via_dual(spec, cfg, chi=0.05):
    problem = spec.cu_problem()
    h, rep = iterate(problem, cfg)
    out = rep.to_dict()
    out["representation"] = _representation_check(h, problem.constants, chi)
    return h, out


# ---------------------------------------------------------------- center manifold

@dataclass
class ManifoldTriple:
    """``center[b, node] = (x_s, x_u)`` over base samples and center-grid nodes."""

    h_cs: object
    h_cu: object
    center: np.ndarray
    center_grid: FiberGrid
    mu_cs: float
    mu_cu: float
    residual: float

    @property
    def mu_c(self):
        return max(self.mu_cs, self.mu_cu)

    @property
    def stable_dim(self):
        return self.h_cu.du

    def evaluate(self, base, xc):
        """Center-manifold point ``(x_s, x_u)`` at base params and center coordinates."""
        atlas = self.h_cs.atlas
        base = np.atleast_2d(base)
        xc = np.atleast_2d(xc)
        xc = self.center_grid.retract(xc) if self.center_grid.dim else xc
        k = self.center.shape[2]
        g = self.center_grid
        if atlas.interpolation == "periodic":
            v = self.center.reshape(tuple(atlas.shape) + tuple(g.shape) + (k,))
            axes = atlas.axes() + g.axes()
            per = [True] * len(atlas.shape) + [False] * g.dim
            periods = [atlas.period] * len(atlas.shape) + [0.0] * g.dim
            return multilinear(v, axes, per, periods, np.hstack([base, xc]))
        v = self.center[0].reshape(tuple(g.shape) + (k,))
        return multilinear(v, g.axes(), [False] * g.dim, [0.0] * g.dim, xc)

    def to_dict(self):
        return _jsonable({"mu_cs": self.mu_cs, "mu_cu": self.mu_cu, "mu_c": self.mu_c,
                          "residual": self.residual, "max_center": float(np.abs(self.center).max(initial=0.0))})

    def write(self, prefix):
        self.h_cs.write(f"{prefix}_cs")
        self.h_cu.write(f"{prefix}_cu")
        atlas = self.h_cs.atlas
        pts_c = self.center_grid.points()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        db, dc = atlas.base_dim, self.center_grid.dim
        ds = self.stable_dim
        du = self.center.shape[2] - ds
        w.writerow([f"p{i}" for i in range(db)] + [f"c{i}" for i in range(dc)]
                   + [f"s{i}" for i in range(ds)] + [f"u{i}" for i in range(du)])
        for b in range(atlas.n_samples):
            for j, c in enumerate(pts_c):
                w.writerow(["%.17g" % v for v in list(atlas.params[b]) + list(c) + list(self.center[b, j])])
        with open(f"{prefix}_center.csv", "w", newline="") as fh:
            fh.write(buf.getvalue())
        with open(f"{prefix}_summary.json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def intersect_center(h_cs, h_cu, tol=1e-10, max_iter=500):
    """Solve ``x_u = h_cs(m, x_c, x_s)``, ``x_s = h_cu(m, x_c, x_u)`` on the center grid."""
    mu_cs, mu_cu = h_cs.lipschitz_u(), h_cu.lipschitz_u()
    if not mu_cs * mu_cu < 1:
        raise HypothesisError(f"mu_cs * mu_cu = {mu_cs:.4g} * {mu_cu:.4g} >= 1")
    dc = h_cs.grid.center_dim
    cgrid = FiberGrid(h_cs.grid.radii[:dc], h_cs.grid.nodes[:dc], dc)
    atlas = h_cs.atlas
    pc = cgrid.points()
    nb = atlas.n_samples
    base = np.repeat(atlas.params, pc.shape[0], axis=0)
    xc = np.tile(pc, (nb, 1))
    ds, du = h_cu.du, h_cs.du
    s = np.zeros((base.shape[0], ds))
    u = np.zeros((base.shape[0], du))
    for it in range(max_iter):
        u_new = h_cs.evaluate(np.hstack([base, xc, s]))
        s_new = h_cu.evaluate(np.hstack([base, xc, u_new]))
        change = max(np.abs(u_new - u).max(initial=0.0), np.abs(s_new - s).max(initial=0.0))
        s, u = s_new, u_new
        if change <= tol * 1e-2:
            break
    else:
        raise HypothesisError("center intersection did not converge")
    res = max(np.abs(h_cs.evaluate(np.hstack([base, xc, s])) - u).max(initial=0.0),
              np.abs(h_cu.evaluate(np.hstack([base, xc, u])) - s).max(initial=0.0))
    center = np.hstack([s, u]).reshape(nb, pc.shape[0], ds + du)
    return ManifoldTriple(h_cs, h_cu, center, cgrid, mu_cs, mu_cu, float(res))


def center_bi_invariance(spec, triple, cfg_cs, cfg_cu, n=100, core=None, seed=0):
    """Forward (via ``h_cs``) and backward (via the dual on ``h_cu``) images of
    center-manifold points, measured against the center manifold."""
    rng = np.random.default_rng(seed)
    atlas = spec.atlas
    dc, ds, du = spec.dims
    db = atlas.base_dim
    r = min(cfg_cs.eps0, cfg_cu.eps0) if core is None else core
    idx = rng.integers(0, atlas.n_samples, n)
    base = atlas.params[idx]
    xc = rng.uniform(-r, r, (n, dc))
    su = triple.evaluate(base, xc)
    s, u = su[:, :ds], su[:, ds:]
    ok = np.maximum(np.linalg.norm(s, axis=1), np.linalg.norm(xc, axis=1)) <= cfg_cs.eps0
    ok &= np.maximum(np.linalg.norm(u, axis=1), np.linalg.norm(xc, axis=1)) <= cfg_cu.eps0
    base, xc, s, u = base[ok], xc[ok], s[ok], u[ok]
    x_fwd, u_fwd, _ = induced_forward_map(triple.h_cs, spec.cs_problem(), cfg_cs, np.hstack([base, xc, s]),
                                          check_unique=False)
    on = triple.evaluate(x_fwd[:, :db], x_fwd[:, db:db + dc])
    fwd = np.maximum(np.abs(on[:, :ds] - x_fwd[:, db + dc:]).max(axis=1),
                     np.abs(on[:, ds:] - u_fwd).max(axis=1))
    x_bwd, s_bwd, _ = induced_forward_map(triple.h_cu, spec.cu_problem(), cfg_cu, np.hstack([base, xc, u]),
                                          check_unique=False)
    on_b = triple.evaluate(x_bwd[:, :db], x_bwd[:, db:db + dc])
    bwd = np.maximum(np.abs(on_b[:, :ds] - s_bwd).max(axis=1),
                     np.abs(on_b[:, ds:] - x_bwd[:, db + dc:]).max(axis=1))
    return {"points": int(ok.sum()), "forward": float(fwd.max(initial=0.0)),
            "backward": float(bwd.max(initial=0.0))}


# ---------------------------------------------------------------- orbits

@dataclass
class OrbitSegment:
    """Points ``x_k`` (base, center, stable) and ``u_k``; ``residuals[k]`` is the
    membership residual of the step ``k -> k+1``."""

    x: np.ndarray
    u: np.ndarray
    residuals: np.ndarray
    direction: str = "forward"
    type_params: dict = field(default_factory=dict)
    truncated: str = ""
    base_drift: float = 0.0

    @property
    def length(self):
        return self.x.shape[0] - 1

    def to_csv(self):
        dx, du = self.x.shape[1], self.u.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k"] + [f"x{i}" for i in range(dx)] + [f"u{i}" for i in range(du)] + ["residual"])
        res = np.append(self.residuals, 0.0)
        for k in range(self.x.shape[0]):
            w.writerow([k] + ["%.17g" % v for v in self.x[k]] + ["%.17g" % v for v in self.u[k]]
                       + ["%.17g" % res[k]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, direction="forward"):
        rows = list(csv.reader(io.StringIO(text)))
        head, body = rows[0], np.array([[float(v) for v in r] for r in rows[1:]])
        nx = sum(1 for h in head if h.startswith("x"))
        nu = sum(1 for h in head if h.startswith("u"))
        return cls(body[:, 1:1 + nx], body[:, 1 + nx:1 + nx + nu], body[:-1, -1], direction)


def forward_step(pair, x1, y1, tol=1e-13, max_iter=60):
    """True forward image: solve ``G(x1, y2) = y1`` by Newton, then ``x2 = F(x1, y2)``."""
    x1, y1 = np.atleast_2d(x1), np.atleast_2d(y1)
    dx = x1.shape[1]
    y2 = y1.copy()
    for _ in range(max_iter):
        g = pair.evaluate(x1, y2)[1]
        r = g - y1
        if np.abs(r).max(initial=0.0) <= tol:
            break
        dg = pair.jacobians(x1, y2)[1][:, :, dx:]
        y2 = y2 - np.linalg.solve(dg, r[..., None])[..., 0]
    else:
        raise HypothesisError("forward step: G(x, .) could not be inverted")
    return pair.evaluate(x1, y2)[0], y2


def _fiber_norms(x, db, dc):
    return np.linalg.norm(x[:, db:db + dc], axis=1), np.linalg.norm(x[:, db + dc:], axis=1)


def generate_orbit(problem, h, x0, steps, cfg, u0=None, method="graph"):
    """Forward orbit starting at ``(x0, u0)``.

    ``method="graph"`` follows the map induced on ``Graph h``;
    ``method="exact"`` solves the two-point problem with the far end on
    ``Graph h``; ``method="dynamics"`` steps the true dynamics from
    ``u0`` and truncates once the orbit leaves the tube.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    db, dc = problem.base_dim, problem.center_dim
    if _core_out(x0[None, :], cfg, db, dc):
        raise ValueError("z0 outside tube")
    pair = problem.pair
    xs, us = [x0], []
    reason = ""
    if method == "graph":
        us.append(h.evaluate(x0[None, :])[0])
        for _ in range(steps):
            xp, up, _ = solve_cs_fixed_point(problem.F, h.evaluate, xs[-1][None, :], cfg.tol_fixed_point)
            xs.append(xp[0])
            us.append(up[0])
    elif method == "exact":
        xs = np.tile(x0, (steps + 1, 1))
        us = np.zeros((steps + 1, problem.unstable_dim))
        for _ in range(500):
            old = (xs.copy(), us.copy())
            for k in range(steps):
                xs[k + 1] = pair.evaluate(xs[k][None], us[k + 1][None])[0][0]
            us[steps] = h.evaluate(xs[steps][None])[0]
            for k in range(steps - 1, -1, -1):
                us[k] = pair.evaluate(xs[k][None], us[k + 1][None])[1][0]
            if max(np.abs(xs - old[0]).max(), np.abs(us - old[1]).max()) <= 1e-15:
                break
        xs, us = list(xs), list(us)
    elif method == "dynamics":
        if u0 is None:
            raise ValueError("dynamics orbits need u0")
        us.append(np.atleast_1d(np.asarray(u0, dtype=float)))
        for k in range(steps):
            xn, un = forward_step(pair, xs[-1][None], us[-1][None])
            xs.append(xn[0])
            us.append(un[0])
            if np.linalg.norm(un[0]) > cfg.rho or _core_out(xn, cfg, db, dc, radius=cfg.sigma):
                reason = f"left the tube at step {k + 1}"
                break
    else:
        raise ValueError(f"unknown method {method!r}")
    x, u = np.array(xs), np.array(us)
    res = np.array([float(pair_membership(pair, x[k], u[k], x[k + 1], u[k + 1])) for k in range(len(x) - 1)])
    drift = 0.0
    if db and len(x) > 1:
        img = problem.atlas.base_map(x[:-1, :db])
        drift = float(np.abs(problem.atlas.param_distance(x[1:, :db], img)).max())
    return OrbitSegment(x, u, res, "forward", {"eps0": cfg.eps0, "sigma": cfg.sigma, "rho": cfg.rho},
                        reason, drift)


def _core_out(x, cfg, db, dc, radius=None):
    c, s = _fiber_norms(np.atleast_2d(x), db, dc)
    r = cfg.eps0 if radius is None else radius
    return bool(np.any(np.maximum(c, s) > r * (1 + 1e-12)))


def pair_membership(pair, x1, u1, x2, u2):
    f, g = pair.evaluate(np.atleast_2d(x1), np.atleast_2d(u2))
    return max(np.abs(f - np.atleast_2d(x2)).max(), np.abs(g - np.atleast_2d(u1)).max())


def classify_orbit(orbit, h, lam_hat, rho, tol=1e-6, triple=None):
    """Check ``|h(x_k) - u_k| <= lam_hat^(K-k) * 2 rho + tol`` along a forward orbit.

    With ``triple`` and ``direction == "biinfinite"`` every point must lie on
    the center manifold within ``tol``.
    """
    K = orbit.length
    res = np.linalg.norm(h.evaluate(orbit.x) - orbit.u, axis=1)
    if orbit.direction == "biinfinite" and triple is not None:
        db = h.atlas.base_dim
        dc = h.grid.center_dim
        ds = triple.stable_dim
        on = triple.evaluate(orbit.x[:, :db], orbit.x[:, db:db + dc])
        res = np.maximum(np.abs(on[:, :ds] - orbit.x[:, db + dc:]).max(axis=1),
                         np.abs(on[:, ds:] - orbit.u).max(axis=1))
        bound = np.full(K + 1, tol)
    else:
        bound = lam_hat ** (K - np.arange(K + 1)) * 2 * rho + tol
    bad = np.flatnonzero(res > bound)
    viol = [{"index": int(k), "residual": float(res[k]), "bound": float(bound[k])} for k in bad]
    return ConditionReport(not viol, viol, None,
                           {"residuals": res.tolist(), "bounds": bound.tolist(), "lambda_hat": lam_hat,
                            "direction": orbit.direction})


def growth_characterization(orbit, h, cfg, lam_cs, beta0=None, eps_s=None, bound=None, chi_hat=0.05, tol=1e-6):
    """Membership test for orbits with controlled growth (invariant base only)."""
    if cfg.mode != "invariant":
        raise ValueError("growth characterization needs invariant mode")
    db, dc = h.atlas.base_dim, h.grid.center_dim
    s = np.linalg.norm(orbit.x[:, db:], axis=1)
    u = np.linalg.norm(orbit.u, axis=1)
    cond_ratio = beta0 is not None and bool(np.all(u[1:] <= beta0 * s[1:] + 1e-15))
    cond_weight = False
    if eps_s is not None and bound is not None:
        w = np.cumprod(np.full(len(s), float(eps_s)))
        cond_weight = bool(np.max((s + u) / w) < bound)
    values = {"ratio_condition": cond_ratio, "weighted_condition": cond_weight}
    if not (cond_ratio or cond_weight):
        values["status"] = "inconclusive"
        return ConditionReport(True, [], None, values)
    res = np.linalg.norm(h.evaluate(orbit.x) - orbit.u, axis=1)
    viol = [{"index": int(k), "kind": "membership", "value": float(res[k])} for k in np.flatnonzero(res > tol)]
    rate = np.broadcast_to(np.asarray(lam_cs, dtype=float), (len(s) - 1,))
    decay = s[1:] <= (rate + chi_hat) * s[:-1] + 1e-15
    viol += [{"index": int(k + 1), "kind": "decay", "value": float(s[k + 1])} for k in np.flatnonzero(~decay)]
    values.update({"status": "asserted", "membership": res.tolist()})
    return ConditionReport(not viol, viol, None, values)
