"""Graph transform for center-stable sections.

A ``SectionProblem`` is a generating pair in adapted coordinates
``x = (base params, center fiber, stable fiber)`` and ``z = unstable``.
One sweep solves ``x' = F(x, h(x'))`` at every grid node, evaluates
``G(x, h(x'))`` and multiplies by the bump.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from .atlas import FiberGrid, GraphSection
from .conditions import _jsonable, check_hyperbolicity_predicates
from .correspondence import HypothesisError

MODES = ("general", "invariant", "strong_s_contraction", "strictly_inflowing")
QUINTIC_C1 = 15.0 / 8.0
NOISE_FLOOR = 1e-11


class FixedPointError(HypothesisError):
    def __init__(self, msg, node=None):
        super().__init__(msg if node is None else f"{msg} (node {node})")
        self.node = node


@dataclass
class SectionProblem:
    """Correspondence data consumed by the transform."""

    atlas: object
    pair: object
    center_dim: int
    stable_dim: int
    unstable_dim: int
    constants: object = None
    label: str = ""
    truth: object = None
    eta: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def base_dim(self):
        return self.atlas.base_dim

    @property
    def fiber_dim(self):
        return self.center_dim + self.stable_dim

    def F(self, x, z):
        return self.pair.evaluate(x, z)[0]

    def G(self, x, z):
        return self.pair.evaluate(x, z)[1]


@dataclass
class TransformConfig:
    sigma: float = 0.1
    rho: float = 0.1
    eps: float = 0.1
    eps0: float = None
    eta1: float = None
    eta2: float = None
    varsigma0: float = 2.0
    mode: str = "general"
    smooth: bool = False
    nodes: object = 21
    tol_fixed_point: float = 1e-13
    tol_section: float = 1e-10
    max_sweeps: int = 200
    threads: int = 1
    interpolation: str = "auto"
    eps_star: float = 0.1
    c_star: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not (self.sigma > 0 and self.rho > 0 and self.eps > 0):
            raise ValueError("radii must be positive")
        if not 0 < self.c_star < 1:
            raise ValueError("c_star must lie in (0, 1)")
        if self.eps0 is None:
            self.eps0 = self.c_star * self.sigma
        if self.eta1 is None:
            self.eta1 = (1.0 - self.eps_star) * self.sigma
        if self.eta2 is None:
            self.eta2 = self.eta1 / 2.0
        if not 0 < self.eta2 < self.eta1 < self.sigma:
            raise ValueError("need 0 < eta2 < eta1 < sigma")
        if self.tol_fixed_point <= 0 or self.tol_section <= 0:
            raise ValueError("tolerances must be positive")
        if self.interpolation not in ("auto", "linear", "cubic"):
            raise ValueError("interpolation must be auto, linear or cubic")
        if self.smooth:
            self.varsigma0 = max(self.varsigma0, QUINTIC_C1 + 1.0)

    def order(self, n_axes):
        """Interpolation order; ``auto`` uses cubic up to four grid axes."""
        if self.interpolation == "auto":
            return 3 if n_axes <= 4 else 1
        return 3 if self.interpolation == "cubic" else 1

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TransformConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return _jsonable({f.name: getattr(self, f.name) for f in fields(self)})

    def grid(self, center_dim, stable_dim):
        radii = [self.eps] * center_dim + [self.sigma] * stable_dim
        nodes = self.nodes if np.ndim(self.nodes) else [self.nodes] * len(radii)
        return FiberGrid(np.array(radii, dtype=float), tuple(nodes), center_dim)


# ---------------------------------------------------------------- bump

class BumpProfile:
    """Cutoff ``l(t)``: 1 for ``t <= eta2``, 0 for ``t >= eta1``."""

    def __init__(self, eta1, eta2, smooth=False):
        if not 0 < eta2 < eta1:
            raise ValueError("need 0 < eta2 < eta1")
        self.eta1, self.eta2, self.smooth = float(eta1), float(eta2), bool(smooth)
        self.C1 = QUINTIC_C1 if smooth else 1.0
        self.lip = self.C1 / (self.eta1 - self.eta2)

    def _u(self, t):
        return np.clip((np.asarray(t, dtype=float) - self.eta2) / (self.eta1 - self.eta2), 0.0, 1.0)

    def __call__(self, t):
        u = self._u(t)
        if self.smooth:
            return 1.0 - u ** 3 * (10.0 - 15.0 * u + 6.0 * u * u)
        return 1.0 - u

    def derivative(self, t):
        u = self._u(t)
        inside = (np.asarray(t) > self.eta2) & (np.asarray(t) < self.eta1)
        if self.smooth:
            d = -30.0 * u * u * (1.0 - u) ** 2
        else:
            d = -np.ones_like(u)
        return np.where(inside, d / (self.eta1 - self.eta2), 0.0)


def bump_profile(eta1, eta2, smooth=False):
    return BumpProfile(eta1, eta2, smooth)


def _bump_arg(points, cfg, base_dim, center_dim):
    fib = points[:, base_dim:]
    c = np.linalg.norm(fib[:, :center_dim], axis=1)
    s = np.linalg.norm(fib[:, center_dim:], axis=1)
    if cfg.mode == "strong_s_contraction":
        return c, np.zeros_like(c, dtype=bool)
    return np.maximum(c, s), s > c


def bump(points, cfg, base_dim=0, center_dim=0):
    """Truncation factor at section points ``(base params, x_c, x_s)``.

    The distance to the base set is the center-fiber norm; the stable
    argument is dropped in ``strong_s_contraction`` mode and there is no
    truncation in ``strictly_inflowing`` mode.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if cfg.mode == "strictly_inflowing":
        return np.ones(pts.shape[0])
    t, _ = _bump_arg(pts, cfg, base_dim, center_dim)
    return bump_profile(cfg.eta1, cfg.eta2, cfg.smooth)(t)


def bump_gradient(points, cfg, base_dim=0, center_dim=0):
    """Gradient of the truncation factor with respect to ``x`` (zero along the base)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    g = np.zeros_like(pts)
    if cfg.mode == "strictly_inflowing":
        return g
    t, s_wins = _bump_arg(pts, cfg, base_dim, center_dim)
    dl = bump_profile(cfg.eta1, cfg.eta2, cfg.smooth).derivative(t)
    fib = pts[:, base_dim:]
    safe = np.where(t > 0, t, 1.0)[:, None]
    unit = fib / safe
    c_part = unit.copy()
    c_part[:, center_dim:] = 0.0
    s_part = unit.copy()
    s_part[:, :center_dim] = 0.0
    g[:, base_dim:] = dl[:, None] * np.where(s_wins[:, None], s_part, c_part)
    return g


# ---------------------------------------------------------------- fixed point

def solve_cs_fixed_point(F, section, x, tol=1e-13, max_iter=500, x_init=None):
    """Picard solve of ``x' = F(x, section(x'))`` for a batch of points.

    Returns ``(x_next, z_next, iterations)`` with ``z_next = section(x_next)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x_init is None:
        du = np.asarray(section(x[:1])).shape[1]
        xp = F(x, np.zeros((x.shape[0], du)))
    else:
        xp = np.array(x_init, dtype=float)
    prev = math.inf
    rising = 0
    for it in range(1, max_iter + 1):
        z = section(xp)
        xn = F(x, z)
        res = np.max(np.abs(xn - xp), axis=1) if xp.shape[1] else np.zeros(x.shape[0])
        xp = xn
        worst = float(res.max(initial=0.0))
        if worst <= tol * (1.0 + float(np.max(np.abs(xn), initial=0.0))):
            return xp, section(xp), it
        rising = rising + 1 if worst > prev else 0
        if rising >= 3:
            raise FixedPointError("fixed point iteration does not contract", int(np.argmax(res)))
        prev = worst
    raise FixedPointError("fixed point iteration did not converge", int(np.argmax(res)))


def _chunks(n, k):
    k = max(1, min(k, n))
    edges = np.linspace(0, n, k + 1).astype(int)
    return [slice(edges[i], edges[i + 1]) for i in range(k)]


def _sweep(h, problem, cfg, pts=None):
    """Per-node fixed point and untruncated transform values."""
    pts = h.node_points() if pts is None else pts

    def work(sl):
        x = pts[sl]
        try:
            xp, z, it = solve_cs_fixed_point(problem.F, h.evaluate, x, cfg.tol_fixed_point)
        except FixedPointError as exc:
            node = None if exc.node is None else sl.start + exc.node
            raise FixedPointError("per-node fixed point failed", node) from exc
        return xp, problem.G(x, z), it

    parts = _run(work, _chunks(pts.shape[0], cfg.threads), cfg.threads)
    xp = np.vstack([p[0] for p in parts])
    ht = np.vstack([p[1] for p in parts])
    return pts, xp, ht, max(p[2] for p in parts)


def _run(fn, items, threads):
    if threads <= 1 or len(items) == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def transform_once(h, problem, cfg, return_details=False):
    """One application of the graph transform followed by truncation."""
    pts, xp, ht, iters = _sweep(h, problem, cfg)
    psi = bump(pts, cfg, problem.base_dim, problem.center_dim)
    vals = (psi[:, None] * ht).reshape(h.values.shape)
    if cfg.mode == "invariant":
        o = h.grid.origin_index()
        if o is not None:
            vals[:, o, :] = 0.0
    out = h.with_values(vals, fixed_point_iterations=iters)
    if return_details:
        return out, {"points": pts, "x_next": xp, "untruncated": ht, "psi": psi}
    return out


# ---------------------------------------------------------------- metrics and bounds

def section_distance(h1, h2, cfg):
    """Sup distance, or the weighted ``sup |dh| / |fiber|`` in invariant mode."""
    d = np.linalg.norm(h1.values - h2.values, axis=2)
    if cfg.mode != "invariant":
        return float(d.max(initial=0.0))
    fib = h1.grid.points()
    c, s = h1.grid.center_stable_norms(fib)
    w = np.maximum(c, s)
    ok = w > 0
    return float((d[:, ok] / w[ok]).max(initial=0.0))


def _sample_rows(n, k, seed=0):
    if n <= k:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, k, replace=False))


def lambda_hat_bound(problem, cfg, h, n_max=1500):
    """Analytic contraction bound ``sup lambda_u / (1 - alpha * mu1)``.

    ``alpha`` and ``lambda_u`` are the sup of ``|D_z F|`` and ``|D_z G|``
    over the nodes; ``mu1 = max(beta', Lip h)``.  In invariant mode the
    fiber rate ``lambda_cs`` multiplies the bound.
    """
    pts = h.node_points()
    rows = _sample_rows(pts.shape[0], n_max)
    x = pts[rows]
    xp, z, _ = solve_cs_fixed_point(problem.F, h.evaluate, x, cfg.tol_fixed_point)
    df, dg = problem.pair.jacobians(x, z)
    dx = x.shape[1]
    nrm = lambda m: np.linalg.norm(m, 2, axis=(1, 2)) if m.shape[1] and m.shape[2] else np.zeros(m.shape[0])
    alpha = float(nrm(df[:, :, dx:]).max())
    lam_u = float(nrm(dg[:, :, dx:]).max())
    lip = h.lipschitz_u()
    beta_p = 0.0
    if problem.constants is not None:
        beta_p = float(np.max(problem.constants.beta_prime))
    mu1 = max(beta_p, lip)
    if not alpha * mu1 < 1:
        return {"bound": math.inf, "alpha": alpha, "lambda_u": lam_u, "mu1": mu1}
    bound = lam_u / (1.0 - alpha * mu1)
    out = {"alpha": alpha, "lambda_u": lam_u, "mu1": mu1, "lipschitz_h": lip}
    if cfg.mode == "invariant":
        db = problem.base_dim
        lam_cs = float(nrm(df[:, db:, db:dx]).max())
        out["lambda_cs_fiber"] = lam_cs
        bound *= lam_cs
    out["bound"] = bound
    return out


@dataclass
class TransformReport:
    sweeps: int
    final_change: float
    changes: list
    ratios: list
    lambda_hat_measured: float
    lambda_hat_bound: float
    bound_details: dict
    eta_measured: float
    lipschitz: float
    checks: list
    predicates: dict = None
    converged: bool = False

    @property
    def conformance(self):
        finite = [r for r in self.ratios if np.isfinite(r)]
        return all(r <= 1.1 * self.lambda_hat_bound for r in finite)

    @property
    def admissible(self):
        return all(c["passed"] for c in self.checks)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["conformance"] = self.conformance
        d["admissible"] = self.admissible
        return _jsonable(d)


def _admissibility(h, cfg, mu_bound, anchor_bound):
    anchor = float(h.anchor_values().max(initial=0.0))
    rng_sup = float(np.linalg.norm(h.values, axis=2).max(initial=0.0))
    lip = h.lipschitz_u()
    ok_range = rng_sup <= cfg.rho * (1 + 1e-12)
    ok_lip = mu_bound is None or lip <= mu_bound
    ok_anchor = anchor_bound is None or anchor <= anchor_bound
    return {"anchor": anchor, "range": rng_sup, "lipschitz": lip, "mu_bound": mu_bound,
            "anchor_bound": anchor_bound,
            "passed": bool(ok_range and ok_lip and ok_anchor)}


def iterate(problem, cfg, h_init=None, chi=0.05):
    """Iterate the transform from ``h_init`` (zero section by default)."""
    grid = cfg.grid(problem.center_dim, problem.stable_dim)
    order = cfg.order(len(problem.atlas.shape) + grid.dim)
    h = h_init if h_init is not None else GraphSection.zeros(problem.atlas, grid, problem.unstable_dim, cfg.rho,
                                                              order)
    preds = None
    mu_bound = None
    anchor_bound = None
    if problem.constants is not None:
        c = problem.constants
        pmode = "dichotomy"
        try:
            preds = check_hyperbolicity_predicates(c, pmode).to_dict()
        except ValueError:
            preds = None
        mu_bound = (1 + chi) * float(np.max(c.beta_prime)) + chi
        k1 = 1.0
        anchor_bound = (float(np.max(c.lambda_u)) * (float(np.max(c.beta)) + k1) + 1.0) * problem.eta + 1e-12
    changes, ratios, checks = [], [], []
    rising = 0
    converged = False
    for sweep in range(1, cfg.max_sweeps + 1):
        h_new = transform_once(h, problem, cfg)
        change = section_distance(h_new, h, cfg)
        if changes:
            prev = changes[-1]
            r = change / prev if prev > NOISE_FLOOR else float("nan")
            ratios.append(r)
            rising = rising + 1 if (np.isfinite(r) and r >= 1.0) else 0
        changes.append(change)
        checks.append({"sweep": sweep, **_admissibility(h_new, cfg, mu_bound, anchor_bound)})
        h = h_new
        if change <= cfg.tol_section:
            converged = True
            break
        if rising >= 3:
            raise HypothesisError(f"graph transform does not contract (ratios {ratios[-3:]}); "
                                  f"predicates: {preds}")
    finite = [r for r in ratios if np.isfinite(r)]
    bound = lambda_hat_bound(problem, cfg, h)
    eta = 0.0
    if problem.atlas.n_samples:
        eta = float(h.anchor_values().max(initial=0.0))
    report = TransformReport(
        sweeps=len(changes), final_change=changes[-1], changes=changes, ratios=ratios,
        lambda_hat_measured=max(finite) if finite else 0.0, lambda_hat_bound=bound["bound"],
        bound_details=bound, eta_measured=eta, lipschitz=h.lipschitz_u(), checks=checks,
        predicates=preds, converged=converged)
    h.meta.update({"sweeps": report.sweeps, "label": problem.label, "mode": cfg.mode})
    return h, report


# ---------------------------------------------------------------- induced map and contraction

def core_violation(points, cfg, base_dim, center_dim):
    fib = np.atleast_2d(points)[:, base_dim:]
    c = np.linalg.norm(fib[:, :center_dim], axis=1)
    s = np.linalg.norm(fib[:, center_dim:], axis=1)
    return np.maximum(c, s) > cfg.eps0 * (1 + 1e-12)


def induced_forward_map(h0, problem, cfg, points, check_unique=True, seed=0):
    """Image of graph points ``(x, h0(x))`` that stays on the graph.

    Returns ``(x_next, u_next, info)``; ``info["uniqueness_gap"]`` compares
    with a solve started from a perturbed guess.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    bad = core_violation(x, cfg, problem.base_dim, problem.center_dim)
    if bad.any():
        raise ValueError(f"point outside core tube (index {int(np.flatnonzero(bad)[0])})")
    xp, up, it = solve_cs_fixed_point(problem.F, h0.evaluate, x, cfg.tol_fixed_point)
    info = {"iterations": it}
    if check_unique:
        rng = np.random.default_rng(seed)
        pert = xp.copy()
        pert[:, problem.base_dim:] += rng.uniform(-1, 1, pert[:, problem.base_dim:].shape) * 1e-3
        xq, _, _ = solve_cs_fixed_point(problem.F, h0.evaluate, x, cfg.tol_fixed_point, x_init=pert)
        info["uniqueness_gap"] = float(np.abs(problem.atlas.param_distance(xq[:, :problem.base_dim],
                                                                            xp[:, :problem.base_dim])).max(initial=0.0)
                                       + np.abs(xq[:, problem.base_dim:] - xp[:, problem.base_dim:]).max(initial=0.0))
    return xp, up, info


def invariance_residual(h0, problem, points, tol=1e-13):
    """``|G(x, h0(x')) - h0(x)|`` where ``x'`` solves the fixed point."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    xp, z, _ = solve_cs_fixed_point(problem.F, h0.evaluate, x, tol)
    return np.linalg.norm(problem.G(x, z) - h0.evaluate(x), axis=1)


def random_sections(atlas, grid, du, n, amplitude, slope, invariant=False, seed=0, order=1):
    """Smooth random sections: linear in the fiber, modulated along the base."""
    rng = np.random.default_rng(seed)
    fib = grid.points()
    out = []
    for _ in range(n):
        lin = rng.uniform(-1, 1, (grid.dim, du)) * slope / max(1.0, math.sqrt(grid.dim))
        const = np.zeros(du) if invariant else rng.uniform(-1, 1, du) * amplitude
        base = np.ones(atlas.n_samples)
        if atlas.interpolation == "periodic":
            base = 1.0 + 0.2 * np.cos(atlas.params @ rng.integers(-1, 2, atlas.base_dim) + rng.uniform(0, 6.283))
        v = base[:, None, None] * (fib @ lin + const)[None, :, :]
        out.append(GraphSection(atlas, grid, v, order=order))
    return out


def estimate_contraction(problem, cfg, trials=4, seed=0, sections=None):
    """Max of ``d(Gamma h1, Gamma h2) / d(h1, h2)`` over random admissible pairs."""
    grid = cfg.grid(problem.center_dim, problem.stable_dim)
    if sections is None:
        sections = random_sections(problem.atlas, grid, problem.unstable_dim, 2 * trials,
                                   0.2 * cfg.rho, 0.1, cfg.mode == "invariant", seed,
                                   cfg.order(len(problem.atlas.shape) + grid.dim))
    if len(sections) < 2:
        raise ValueError("need at least two sections")
    best = 0.0
    for a, b in zip(sections[0::2], sections[1::2]):
        d0 = section_distance(a, b, cfg)
        if d0 <= NOISE_FLOOR:
            continue
        d1 = section_distance(transform_once(a, problem, cfg), transform_once(b, problem, cfg), cfg)
        best = max(best, d1 / d0)
    return best
