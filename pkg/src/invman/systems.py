"""Example systems and a formal power-series oracle.

Every system exposes a center-stable generating pair over
``x = (base params, x_c, x_s)``, ``z = x_u`` and a stable/center-unstable
pair over ``x = x_s``, ``z = (base params, x_c, x_u)`` whose dual gives
the center-unstable problem.
"""
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .atlas import build_base_sample
from .conditions import check_hyperbolicity_predicates, derive_ab_constants, pair_lipschitz_data
from .correspondence import (CorrespondenceHandle, GeneratingPair, HypothesisError, dual, from_map, shift)
from .graph_transform import SectionProblem

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class SystemSpec:
    name: str
    atlas: object
    dims: tuple  # (center, stable, unstable) fiber dimensions
    cs_handle: CorrespondenceHandle
    scu_handle: CorrespondenceHandle = None
    inverse_base_map: object = None
    constants: object = None
    cu_constants: object = None
    truth_cs: object = None
    truth_cu: object = None
    eta: float = 0.0
    params: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def cs_problem(self):
        dc, ds, du = self.dims
        return SectionProblem(self.atlas, self.cs_handle.pair, dc, ds, du, self.constants,
                              f"{self.name}:cs", self.truth_cs, self.eta)

    def cu_problem(self):
        """Center-unstable problem as the cs problem of the dual of the s/cu pair."""
        if self.scu_handle is None:
            raise ValueError(f"system {self.name!r} has no s/cu block form")
        if self.inverse_base_map is None and self.atlas.interpolation == "periodic":
            raise ValueError("base map is not invertible on the atlas")
        dc, ds, du = self.dims
        atlas = self.atlas
        if self.inverse_base_map is not None:
            atlas = replace(atlas, base_map=self.inverse_base_map, map_index=None)
        d = dual(self.scu_handle)
        return SectionProblem(atlas, d.pair, dc, du, ds, self.cu_constants,
                              f"{self.name}:cu", self.truth_cu, self.eta)

    def local_handle(self, i):
        """Correspondence in coordinates centered at sample ``i`` and its image."""
        db = self.atlas.base_dim
        dc, ds, du = self.dims
        p = self.atlas.params[i]
        img = self.atlas.base_map(p[None, :])[0]
        zeros = np.zeros(dc + ds)
        return shift(self.cs_handle, (np.concatenate([p, zeros]), np.zeros(du)),
                     (np.concatenate([img, zeros]), np.zeros(du)))


def _constants_for(handle, radius_x, radius_z, varsigma0=2.0, n=2000):
    lip = pair_lipschitz_data(handle, radius_x, radius_z, n=n)
    c = derive_ab_constants(*lip, varsigma0=varsigma0)
    c.notes["pair_lipschitz"] = list(lip)
    return c


# ---------------------------------------------------------------- linear block systems

def _block_matrix(blocks, coupling, coupling_matrix):
    rates = [float(v) for k in ("c", "s", "u") for v in blocks.get(k, [])]
    n = len(rates)
    if coupling_matrix is None:
        e = np.ones((n, n)) - np.eye(n)
    else:
        e = np.asarray(coupling_matrix, dtype=float)
    return np.diag(rates) + coupling * e


def linear_block_system(blocks, coupling=0.0, coupling_matrix=None, radius=1.0, varsigma0=2.0):
    """Linear map with block rates ``{"s": [...], "c": [...], "u": [...]}``.

    State coordinates are ordered center, stable, unstable.
    """
    dc, ds, du = (len(blocks.get(k, [])) for k in ("c", "s", "u"))
    if du == 0 or dc + ds == 0:
        raise ValueError("need nonempty cs and u blocks")
    mat = _block_matrix(blocks, coupling, coupling_matrix)
    n = mat.shape[0]
    f = lambda w: w @ mat.T
    jac = lambda w: np.broadcast_to(mat, (w.shape[0], n, n))
    cs = from_map(f, (dc + ds, du), radius, jac=jac, label="linear:cs")
    eye = np.eye(n)
    b_s = eye[:, dc:dc + ds]
    b_cu = np.hstack([eye[:, :dc], eye[:, dc + ds:]])
    scu = from_map(f, (b_s, b_cu), radius, jac=jac, label="linear:scu") if ds else None
    atlas = build_base_sample("point")
    spec = SystemSpec("linear_block", atlas, (dc, ds, du), cs, scu,
                      params={"blocks": blocks, "coupling": coupling}, info={"matrix": mat})
    # ground truth: eigenspace graph charts
    w, v = np.linalg.eig(mat)
    order = np.argsort(np.abs(w))
    v_cs = np.real_if_close(v[:, order[:dc + ds]])
    m_cs = np.real(v_cs[dc + ds:, :] @ np.linalg.inv(v_cs[:dc + ds, :]))
    spec.truth_cs = lambda x: np.atleast_2d(x) @ m_cs.T
    spec.info["cs_chart"] = m_cs
    if ds:
        v_cu = v[:, order[ds:]]
        rows_cu = list(range(dc)) + list(range(dc + ds, n))
        m_cu = np.real(v_cu[dc:dc + ds, :] @ np.linalg.inv(v_cu[rows_cu, :]))
        spec.truth_cu = lambda x: np.atleast_2d(x) @ m_cu.T
        spec.info["cu_chart"] = m_cu
    spec.constants = _constants_for(cs, radius, radius, varsigma0)
    if scu is not None:
        spec.cu_constants = _constants_for(dual(scu), radius, radius, varsigma0)
    spec.info["predicates"] = check_hyperbolicity_predicates(spec.constants, "dichotomy").to_dict()
    spec.info["predicates_smooth"] = check_hyperbolicity_predicates(spec.constants, "smooth").to_dict()
    return spec


def direct_cu_problem(spec):
    """Center-unstable problem from the inverse of a linear system (no duality)."""
    mat = spec.info.get("matrix")
    if mat is None:
        raise ValueError("direct cu computation needs a linear system")
    dc, ds, du = spec.dims
    n = mat.shape[0]
    inv = np.linalg.inv(mat)
    eye = np.eye(n)
    b_cu = np.hstack([eye[:, :dc], eye[:, dc + ds:]])
    b_s = eye[:, dc:dc + ds]
    f = lambda w: w @ inv.T
    h = from_map(f, (b_cu, b_s), 1.0, jac=lambda w: np.broadcast_to(inv, (w.shape[0], n, n)),
                 label="inverse:cu")
    return SectionProblem(spec.atlas, h.pair, dc, du, ds, spec.cu_constants, f"{spec.name}:cu-direct")


# ---------------------------------------------------------------- polynomial arithmetic

class Poly:
    """Multivariate polynomial as ``{exponent tuple: coefficient}``."""

    def __init__(self, nvars, coeffs=None):
        self.n = nvars
        self.c = {k: float(v) for k, v in (coeffs or {}).items() if v != 0}

    @classmethod
    def var(cls, i, n):
        e = [0] * n
        e[i] = 1
        return cls(n, {tuple(e): 1.0})

    @classmethod
    def const(cls, v, n):
        return cls(n, {(0,) * n: v})

    def __add__(self, o):
        out = dict(self.c)
        for k, v in o.c.items():
            out[k] = out.get(k, 0.0) + v
        return Poly(self.n, out)

    def __sub__(self, o):
        return self + o.scale(-1.0)

    def scale(self, a):
        return Poly(self.n, {k: a * v for k, v in self.c.items()})

    def mul(self, o, order):
        out = {}
        for k1, v1 in self.c.items():
            d1 = sum(k1)
            for k2, v2 in o.c.items():
                if d1 + sum(k2) > order:
                    continue
                k = tuple(a + b for a, b in zip(k1, k2))
                out[k] = out.get(k, 0.0) + v1 * v2
        return Poly(self.n, out)

    def truncate(self, order):
        return Poly(self.n, {k: v for k, v in self.c.items() if sum(k) <= order})

    def part(self, degree):
        return Poly(self.n, {k: v for k, v in self.c.items() if sum(k) == degree})

    def compose(self, subs, order):
        """Substitute polynomials ``subs[j]`` for variable ``j``."""
        n2 = subs[0].n
        out = Poly(n2)
        cache = {}

        def power(j, e):
            if (j, e) not in cache:
                cache[(j, e)] = Poly.const(1.0, n2) if e == 0 else power(j, e - 1).mul(subs[j], order)
            return cache[(j, e)]

        for k, v in self.c.items():
            term = Poly.const(v, n2)
            for j, e in enumerate(k):
                if e:
                    term = term.mul(power(j, e), order)
            out = out + term
        return out.truncate(order)

    def evaluate(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.zeros(pts.shape[0])
        for k, v in self.c.items():
            out += v * np.prod(pts ** np.asarray(k), axis=1)
        return out

    def derivative(self, i):
        out = {}
        for k, v in self.c.items():
            if k[i]:
                kk = list(k)
                kk[i] -= 1
                out[tuple(kk)] = out.get(tuple(kk), 0.0) + v * k[i]
        return Poly(self.n, out)


@dataclass
class PolyMap:
    """``w -> L w + P(w)`` with ``P`` given by terms ``(component, coeff, exponents)``."""

    linear: np.ndarray
    terms: list
    dims: tuple  # (center, stable, unstable)

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=float)
        self.linear = np.diag(lin) if lin.ndim == 1 else lin
        n = self.linear.shape[0]
        if sum(self.dims) != n:
            raise ValueError("dims do not match the linear part")
        self.polys = [Poly(n) for _ in range(n)]
        for comp, coeff, exps in self.terms:
            if len(exps) != n or sum(exps) < 2:
                raise ValueError("terms need full exponent tuples of degree >= 2")
            self.polys[comp] = self.polys[comp] + Poly(n, {tuple(int(e) for e in exps): coeff})

    @property
    def n(self):
        return self.linear.shape[0]

    def __call__(self, w):
        w = np.atleast_2d(w)
        out = w @ self.linear.T
        for i, p in enumerate(self.polys):
            if p.c:
                out[:, i] += p.evaluate(w)
        return out

    def jacobian(self, w):
        w = np.atleast_2d(w)
        j = np.broadcast_to(self.linear, (w.shape[0], self.n, self.n)).copy()
        for i, p in enumerate(self.polys):
            for k in range(self.n):
                if p.c:
                    d = p.derivative(k)
                    if d.c:
                        j[:, i, k] += d.evaluate(w)
        return j


class ResonanceError(ArithmeticError):
    def __init__(self, component, exponent, value):
        super().__init__(f"resonance at component {component}, exponent {exponent}: divisor {value:.3g}")
        self.component, self.exponent = component, exponent


@dataclass
class TaylorSeries:
    """Graph ``y = sum c[i][k] x^k`` with per-order invariance residuals."""

    side: str
    polys: list
    residuals: list

    def evaluate(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.stack([p.evaluate(x) for p in self.polys], axis=1)

    def coefficients(self):
        return [dict(p.c) for p in self.polys]


def taylor_oracle(pmap, side="cs", order=6):
    """Solve the formal invariance equation of a polynomial map order by order."""
    if order > 12:
        raise ValueError("order must be <= 12")
    lin = pmap.linear
    if np.abs(lin - np.diag(np.diag(lin))).max() > 0:
        raise ValueError("taylor_oracle needs a diagonal linear part")
    dc, ds, du = pmap.dims
    ncs = dc + ds
    rates = np.diag(lin)
    if side == "cs":
        own, other = list(range(ncs)), list(range(ncs, pmap.n))
    elif side == "cu":
        own = list(range(dc)) + list(range(ncs, pmap.n))
        other = list(range(dc, ncs))
    else:
        raise ValueError("side must be 'cs' or 'cu'")
    m = len(own)
    a, b = rates[own], rates[other]
    graph = [Poly(m) for _ in other]
    residuals = []

    def equation(graph, deg):
        # substitute w = (own vars, graph) in the map
        subs = [None] * pmap.n
        for j, i in enumerate(own):
            subs[i] = Poly.var(j, m)
        for j, i in enumerate(other):
            subs[i] = graph[j]
        img_own = [Poly(m, {tuple(int(t == j) for t in range(m)): a[j]}) + pmap.polys[i].compose(subs, deg)
                   for j, i in enumerate(own)]
        lhs = [g.compose(img_own, deg) for g in graph]
        rhs = [graph[j].scale(b[j]) + pmap.polys[i].compose(subs, deg) for j, i in enumerate(other)]
        return [(l - r).truncate(deg) for l, r in zip(lhs, rhs)]

    for deg in range(2, order + 1):
        err = equation(graph, deg)
        for j in range(len(other)):
            new = {}
            for k, v in err[j].part(deg).c.items():
                den = float(np.prod(a ** np.asarray(k))) - b[j]
                if abs(den) < 1e-12:
                    raise ResonanceError(other[j], k, den)
                new[k] = -v / den
            graph[j] = graph[j] + Poly(m, new)
        check = equation(graph, deg)
        residuals.append(max((abs(v) for e in check for v in e.part(deg).c.values()), default=0.0))
    return TaylorSeries(side, graph, residuals)


def poly_perturbed_system(linear, terms, dims, radius=0.3, order=8, varsigma0=2.0, name="poly"):
    """Map ``L w + P(w)`` with its generating pairs and series oracles.

    ``dims = (center, stable, unstable)`` with coordinates in that order.
    """
    pmap = PolyMap(linear, list(terms), tuple(dims))
    dc, ds, du = pmap.dims
    n = pmap.n
    cs = from_map(pmap, (dc + ds, du), radius, jac=pmap.jacobian, label=f"{name}:cs")
    eye = np.eye(n)
    scu = None
    if ds:
        b_s = eye[:, dc:dc + ds]
        b_cu = np.hstack([eye[:, :dc], eye[:, dc + ds:]])
        scu = from_map(pmap, (b_s, b_cu), radius, jac=pmap.jacobian, label=f"{name}:scu")
    spec = SystemSpec(name, build_base_sample("point"), (dc, ds, du), cs, scu,
                      params={"linear": np.diag(pmap.linear).tolist(), "terms": list(terms),
                              "dims": list(dims), "radius": radius},
                      info={"map": pmap})
    diagonal = np.abs(pmap.linear - np.diag(np.diag(pmap.linear))).max() == 0
    if diagonal:
        try:
            ser = taylor_oracle(pmap, "cs", order)
            spec.truth_cs = ser.evaluate
            spec.info["series_cs"] = ser
        except ResonanceError as exc:
            spec.info["series_cs_error"] = str(exc)
        if ds:
            try:
                ser = taylor_oracle(pmap, "cu", order)
                spec.truth_cu = ser.evaluate
                spec.info["series_cu"] = ser
            except ResonanceError as exc:
                spec.info["series_cu_error"] = str(exc)
    spec.constants = _constants_for(cs, radius, radius, varsigma0)
    if scu is not None:
        spec.cu_constants = _constants_for(dual(scu), radius, radius, varsigma0)
    return spec


# ---------------------------------------------------------------- whiskered torus

def _torus_A(theta):
    return 0.8 + 0.1 * np.cos(theta[:, 0])


def whiskered_torus_system(d=1, omega=None, mu=0.5, A=None, eps=0.0, n_samples=256, radius=0.2,
                           varsigma0=2.0):
    """Skew product ``(s, u, c, theta) -> (mu A s, u / (mu A), c, theta + omega)`` plus ``eps * N``.

    ``N`` is cubic: ``N_s = u^3 + s|c|^2``, ``N_u = s^3 + cos(theta_1) u |c|^2``,
    ``N_c = s u c``; it leaves the base invariant and vanishes to second order.
    """
    A = _torus_A if A is None else A
    omega = np.full(d, 2 * math.pi * GOLDEN) if omega is None else np.broadcast_to(
        np.asarray(omega, dtype=float), (d,)).copy()
    atlas = build_base_sample("circle" if d == 1 else "torus_d",
                              {"n": n_samples, "omega": omega, "d": d})
    a_vals = A(atlas.params)
    if not np.all(np.abs(a_vals) < 1.0 / mu):
        raise HypothesisError("spectral violation: |A_theta| < 1/mu fails")

    def unpack_cs(x):
        return x[:, :d], x[:, d:2 * d], x[:, 2 * d:2 * d + 1]

    def cs_joint(x, z):
        th, c, s = unpack_cs(x)
        a = A(th)[:, None]
        c2 = np.sum(c * c, axis=1, keepdims=True)
        cos1 = np.cos(th[:, :1])
        u = (z - eps * s ** 3) / (1.0 / (mu * a) + eps * cos1 * c2)
        f = np.hstack([th + omega, c + eps * s * u * c, mu * a * s + eps * (u ** 3 + s * c2)])
        return f, u

    cs_pair = GeneratingPair(lambda x, z: cs_joint(x, z)[0], lambda x, z: cs_joint(x, z)[1],
                             (2 * d + 1, 1), radius, radius, joint=cs_joint)
    cs = CorrespondenceHandle(cs_pair, label="torus:cs")

    def scu_joint(s, y):
        th2, c2, u2 = y[:, :d], y[:, d:2 * d], y[:, 2 * d:2 * d + 1]
        th = th2 - omega
        a = A(th)[:, None]
        cos1 = np.cos(th[:, :1])
        u, c = u2 * mu * a, c2.copy()
        for _ in range(100):
            cc = np.sum(c * c, axis=1, keepdims=True)
            u_new = mu * a * (u2 - eps * (s ** 3 + cos1 * u * cc))
            c_new = c2 / (1.0 + eps * s * u_new)
            done = max(np.abs(u_new - u).max(initial=0.0), np.abs(c_new - c).max(initial=0.0)) <= 1e-16
            u, c = u_new, c_new
            if done:
                break
        cc = np.sum(c * c, axis=1, keepdims=True)
        s2 = mu * a * s + eps * (u ** 3 + s * cc)
        return s2, np.hstack([th, c, u])

    scu_pair = GeneratingPair(lambda s, y: scu_joint(s, y)[0], lambda s, y: scu_joint(s, y)[1],
                              (1, 2 * d + 1), radius, radius, joint=scu_joint)
    scu = CorrespondenceHandle(scu_pair, label="torus:scu")
    spec = SystemSpec("whiskered_torus", atlas, (d, 1, 1), cs, scu,
                      inverse_base_map=lambda p: p - omega,
                      params={"d": d, "omega": omega.tolist(), "mu": mu, "eps": eps,
                              "n_samples": n_samples, "radius": radius})
    rx = np.array([math.pi] * d + [radius] * (d + 1))
    spec.constants = _constants_for(cs, rx, radius, varsigma0)
    spec.cu_constants = _constants_for(dual(scu), rx, radius, varsigma0)
    lam_s = mu * float(np.max(np.abs(a_vals)))
    lam_u = mu * float(np.max(np.abs(a_vals)))
    spec.info.update({
        "lambda_s_block": lam_s,
        "lambda_u_block": lam_u,
        "expansion_min": 1.0 / lam_u,
        "predicates": check_hyperbolicity_predicates(spec.constants, "dichotomy").to_dict(),
        "predicates_trichotomy": check_hyperbolicity_predicates(
            spec.constants, "trichotomy", c_cu=spec.cu_constants).to_dict(),
    })
    if eps == 0:
        spec.truth_cs = lambda x: np.zeros((np.atleast_2d(x).shape[0], 1))
        spec.truth_cu = lambda x: np.zeros((np.atleast_2d(x).shape[0], 1))
    return spec


@dataclass
class FiberResult:
    theta: np.ndarray
    nodes: np.ndarray
    values: np.ndarray  # (n, 2d + 1): (d theta, x_c, x_u) deviation at time 0
    orbit_s: np.ndarray  # (N + 1, n, 1)
    orbit_y: np.ndarray  # (N + 1, n, 2d + 1)
    sweeps: int
    lipschitz: float
    tail_tolerance: float

    def deviation_norms(self, omega):
        k = np.arange(self.orbit_s.shape[0])[:, None, None]
        d = self.theta.shape[0]
        base = self.theta[None, None, :] + k * np.asarray(omega)
        dth = (self.orbit_y[:, :, :d] - base + math.pi) % (2 * math.pi) - math.pi
        dev = np.concatenate([self.orbit_s, dth, self.orbit_y[:, :, d:]], axis=2)
        return np.linalg.norm(dev, axis=2)


def strong_stable_fiber(spec, theta, radius=0.1, nodes=21, n_orbit=50, tol=1e-14, max_sweeps=500):
    """Strong-stable fiber through the torus point at ``theta``.

    Solves the two-point problem ``s_{k+1} = F(s_k, y_{k+1})``,
    ``y_k = G(s_k, y_{k+1})`` over ``n_orbit`` steps with ``y`` pinned to
    the base orbit at the far end.
    """
    if spec.name != "whiskered_torus":
        raise ValueError("strong stable fibers are implemented for the torus system")
    lam_s = spec.info["lambda_s_block"]
    if not lam_s < 1:
        raise HypothesisError("gap fails: lambda_s < 1 required")
    d = spec.params["d"]
    omega = np.asarray(spec.params["omega"])
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    pair = spec.scu_handle.pair
    s0 = np.linspace(-radius, radius, nodes)[:, None]
    n = s0.shape[0]
    s = np.zeros((n_orbit + 1, n, 1))
    y = np.zeros((n_orbit + 1, n, 2 * d + 1))
    for k in range(n_orbit + 1):
        y[k, :, :d] = theta + k * omega
    s[0] = s0
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        old_s, old_y = s.copy(), y.copy()
        for k in range(n_orbit):
            s[k + 1] = pair.evaluate(s[k], y[k + 1])[0]
        for k in range(n_orbit - 1, -1, -1):
            y[k] = pair.evaluate(s[k], y[k + 1])[1]
        change = max(np.abs(s - old_s).max(), np.abs(y - old_y).max())
        if change <= tol:
            break
    else:
        raise HypothesisError("strong stable fiber sweep did not converge")
    vals = y[0].copy()
    vals[:, :d] -= theta
    dev0 = np.hstack([s[0], vals])
    dev1 = np.hstack([s[1], y[1] - np.concatenate([theta + omega, np.zeros(d + 1)])])
    i, j = np.triu_indices(n, 1)
    lip = float(np.max(np.linalg.norm(dev1[i] - dev1[j], axis=1) / np.linalg.norm(dev0[i] - dev0[j], axis=1)))
    return FiberResult(theta, s0[:, 0], vals, s, y, sweeps, lip, lam_s ** n_orbit)


# ---------------------------------------------------------------- Boussinesq Galerkin

def _phi12(z):
    """``phi1(z) = (e^z - 1)/z`` and ``phi2(z) = (e^z - 1 - z)/z^2``, stable near 0."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < 1e-3
    zs = np.where(small, 1.0, z)
    e = np.exp(zs)
    p1 = np.where(small, 1 + z / 2 + z * z / 6 + z ** 3 / 24, (e - 1) / zs)
    p2 = np.where(small, 0.5 + z / 6 + z * z / 24 + z ** 3 / 120, (e - 1 - zs) / (zs * zs))
    return p1, p2


@dataclass
class Boussinesq:
    """Galerkin truncation of the cosine modes ``k = 1..N`` of the bad Boussinesq equation."""

    n_modes: int
    mu: float
    t0: float
    steps: int = 20
    nonlinear: bool = True

    def __post_init__(self):
        if not 1 <= self.n_modes <= 32:
            raise ValueError("N_modes must be in 1..32")
        k = np.arange(1, self.n_modes + 1)
        self.k = k
        self.disc = 4 * math.pi ** 2 * k ** 2 * (4 * self.mu * math.pi ** 2 * k ** 2 - 1)
        if np.any(np.abs(self.disc) < 1e-12):
            raise ValueError("a mode sits exactly at the center/hyperbolic threshold")
        self.center = k[self.disc < 0]
        self.hyper = k[self.disc > 0]
        self.omega = np.sqrt(-self.disc[self.disc < 0])
        self.lam = np.sqrt(self.disc[self.disc > 0])
        n = self.n_modes
        t = np.zeros((n, n, n))
        for m in range(1, n + 1):
            for j in range(1, n + 1):
                for l in range(1, n + 1):
                    v = 0.5 * ((j + l == m) + (abs(j - l) == m))
                    t[m - 1, j - 1, l - 1] = v * (-4 * math.pi ** 2 * m * m)
        self.tensor = t

    @property
    def dims(self):
        return 2 * len(self.center), len(self.hyper), len(self.hyper)

    def matrix(self):
        n = self.n_modes
        a = np.zeros((2 * n, 2 * n))
        a[:n, n:] = np.eye(n)
        a[n:, :n] = np.diag(self.disc)
        return a

    def spectrum_formula(self):
        vals = []
        for k in range(1, self.n_modes + 1):
            r = 2 * math.pi * k * np.sqrt(complex(self.mu * 4 * math.pi ** 2 * k * k - 1))
            vals += [r, -r]
        return np.array(vals)

    def forcing(self, a):
        """Coefficients of ``(u^2)_xx`` on ``cos(2 pi m x)`` for mode amplitudes ``a``."""
        if not self.nonlinear:
            return np.zeros_like(a)
        return np.einsum("mjl,...j,...l->...m", self.tensor, a, a)

    # eigen-coordinates: center (a, b/omega), stable q = (a - b/lam)/2, unstable p = (a + b/lam)/2
    def to_eigen(self, state):
        n = self.n_modes
        a, b = state[:, :n], state[:, n:]
        ci, hi = self.center - 1, self.hyper - 1
        cen = np.stack([a[:, ci], b[:, ci] / self.omega], axis=2).reshape(state.shape[0], -1)
        q = (a[:, hi] - b[:, hi] / self.lam) / 2
        p = (a[:, hi] + b[:, hi] / self.lam) / 2
        return np.hstack([cen, q, p])

    def from_eigen(self, e):
        n = self.n_modes
        nc = len(self.center)
        nh = len(self.hyper)
        cen = e[:, :2 * nc].reshape(-1, nc, 2)
        q, p = e[:, 2 * nc:2 * nc + nh], e[:, 2 * nc + nh:]
        a = np.zeros((e.shape[0], n))
        b = np.zeros((e.shape[0], n))
        ci, hi = self.center - 1, self.hyper - 1
        a[:, ci] = cen[:, :, 0]
        b[:, ci] = cen[:, :, 1] * self.omega
        a[:, hi] = q + p
        b[:, hi] = self.lam * (p - q)
        return np.hstack([a, b])

    def _weights(self, rate):
        h = self.t0 / self.steps
        z = rate * h
        p1, p2 = _phi12(z)
        out = np.exp(np.asarray(z, dtype=complex)), h * (p1 - p2), h * p2
        if np.isrealobj(rate):
            out = tuple(np.real(v) for v in out)
        return out

    def solve_boundary_value(self, x_cs0, p_t0, tol=1e-13, max_iter=200, return_trajectory=False):
        """Mild two-point solution with center/stable data at 0 and unstable data at ``t0``.

        The forcing is piecewise linear in time on ``steps`` intervals and
        integrated exactly against the linear propagators.
        """
        x_cs0 = np.atleast_2d(x_cs0)
        p_t0 = np.atleast_2d(p_t0)
        nb = x_cs0.shape[0]
        nc, nh = len(self.center), len(self.hyper)
        M = self.steps
        w0 = x_cs0[:, 0:2 * nc:2] + 1j * x_cs0[:, 1:2 * nc:2]
        q0 = x_cs0[:, 2 * nc:]
        eq, i0q, i1q = self._weights(-self.lam)
        ew, i0w, i1w = self._weights(-1j * self.omega)
        ci, hi = self.center - 1, self.hyper - 1
        w = np.zeros((M + 1, nb, nc), dtype=complex)
        q = np.zeros((M + 1, nb, nh))
        p = np.zeros((M + 1, nb, nh))
        forc = np.zeros((M + 1, nb, self.n_modes))
        prev = math.inf
        ratios = []
        for it in range(1, max_iter + 1):
            w[0], q[0], p[M] = w0, q0, p_t0
            fh = forc[:, :, hi] / (2 * self.lam)
            fc = 1j * forc[:, :, ci] / self.omega
            for j in range(M):
                q[j + 1] = eq * q[j] - i0q * fh[j] - i1q * fh[j + 1]
                w[j + 1] = ew * w[j] + i0w * fc[j] + i1w * fc[j + 1]
            for j in range(M, 0, -1):
                p[j - 1] = eq * p[j] - i0q * fh[j] - i1q * fh[j - 1]
            a = np.zeros((M + 1, nb, self.n_modes))
            a[:, :, ci] = w.real
            a[:, :, hi] = q + p
            new = self.forcing(a)
            change = float(np.abs(new - forc).max(initial=0.0))
            forc = new
            if change <= tol * (1 + float(np.abs(forc).max(initial=0.0))):
                break
            if np.isfinite(prev) and prev > 1e-300:
                ratios.append(change / prev)
                if it > 4 and ratios[-1] >= 0.9:
                    raise HypothesisError(
                        f"shooting non-contraction: Picard factor {ratios[-1]:.3g} >= 0.9 at this radius")
            prev = change
        else:
            raise HypothesisError("shooting did not converge")
        cen_t0 = np.stack([w[M].real, w[M].imag], axis=2).reshape(nb, 2 * nc)
        out = {"F": np.hstack([cen_t0, q[M]]), "G": p[0], "iterations": it, "residual": change,
               "ratios": ratios}
        if return_trajectory:
            out.update({"w": w, "q": q, "p": p})
        return out


def boussinesq_galerkin_system(n_modes=8, mu=0.02, t0=0.1, radius=0.01, steps=20, nonlinear=True,
                               varsigma0=2.0, lipschitz_samples=300):
    """Time-``t0`` correspondence of the Galerkin system in eigen-coordinates."""
    bq = Boussinesq(n_modes, mu, t0, steps, nonlinear)
    dc, ds, du = bq.dims
    if dc == 0:
        raise HypothesisError(f"mu = {mu} gives an empty center block for {n_modes} modes")

    def joint(x, z):
        if not nonlinear:
            nc = dc // 2
            w0 = x[:, 0:dc:2] + 1j * x[:, 1:dc:2]
            w = w0 * np.exp(-1j * bq.omega * t0)
            cen = np.stack([w.real, w.imag], axis=2).reshape(x.shape[0], dc)
            return np.hstack([cen, x[:, dc:] * np.exp(-bq.lam * t0)]), z * np.exp(-bq.lam * t0)
        r = bq.solve_boundary_value(x, z)
        return r["F"], r["G"]

    pair = GeneratingPair(lambda x, z: joint(x, z)[0], lambda x, z: joint(x, z)[1],
                          (dc + ds, du), radius, radius, joint=joint)
    cs = CorrespondenceHandle(pair, label="boussinesq:cs")
    spec = SystemSpec("boussinesq", build_base_sample("point"), (dc, ds, du), cs,
                      params={"n_modes": n_modes, "mu": mu, "t0": t0, "radius": radius,
                              "steps": steps, "nonlinear": nonlinear},
                      info={"model": bq})
    lip = pair_lipschitz_data(cs, radius, radius, n=lipschitz_samples)
    spec.constants = derive_ab_constants(*lip, varsigma0=varsigma0)
    spec.constants.notes["pair_lipschitz"] = list(lip)
    spec.info["rate_predictions"] = {
        "lambda_s": float(np.exp(-bq.lam.min() * t0)),
        "lambda_u": float(np.exp(-bq.lam.min() * t0)),
        "lambda_c": 1.0,
    }
    spec.info["predicates"] = check_hyperbolicity_predicates(spec.constants, "dichotomy").to_dict()
    if not nonlinear:
        spec.truth_cs = lambda x: np.zeros((np.atleast_2d(x).shape[0], du))
    return spec


def scan_center_dimension(n_modes, mus):
    """Center dimension of the Galerkin system for each ``mu``."""
    return {float(m): Boussinesq(n_modes, float(m), 0.1).dims[0] for m in mus}


# ---------------------------------------------------------------- registry

def _linear_from_params(p):
    return linear_block_system(p["blocks"], p.get("coupling", 0.0), p.get("coupling_matrix"),
                               p.get("radius", 1.0))


def _poly_from_params(p):
    return poly_perturbed_system(p["linear"], [tuple(t) for t in p.get("terms", [])], p["dims"],
                                 p.get("radius", 0.3), p.get("order", 8))


def _torus_from_params(p):
    return whiskered_torus_system(p.get("d", 1), p.get("omega"), p.get("mu", 0.5), None, p.get("eps", 0.0),
                                  p.get("n_samples", 256), p.get("radius", 0.2))


def _bq_from_params(p):
    return boussinesq_galerkin_system(p.get("n_modes", 8), p.get("mu", 0.02), p.get("t0", 0.1),
                                      p.get("radius", 0.01), p.get("steps", 20), p.get("nonlinear", True))


SYSTEMS = {
    "linear_block": _linear_from_params,
    "poly": _poly_from_params,
    "whiskered_torus": _torus_from_params,
    "boussinesq": _bq_from_params,
}


def build_system(name, params):
    if name not in SYSTEMS:
        raise ValueError(f"unknown system {name!r}")
    return SYSTEMS[name](dict(params or {}))
