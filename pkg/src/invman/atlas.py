"""Sampled base manifolds, splitting fields and sections over fiber grids.

Sections store u-values on a regular box grid in the (center, stable)
fiber for every base sample.  Evaluation is multilinear or tensor cubic,
periodic in the base parameters, and uses the radial retraction onto the
fiber box.
"""
import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .conditions import ConditionReport, _jsonable
from .grassmann import ProjectionPair, Subspace

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------- splitting field

@dataclass
class SplittingField:
    """Projections ``Pi_s, Pi_c, Pi_u`` (arrays ``(B, n, n)``) at each sample."""

    Pi_s: np.ndarray
    Pi_c: np.ndarray
    Pi_u: np.ndarray

    @classmethod
    def from_frames(cls, bc, bs, bu):
        """Projections from frames ``(B, n, k)`` spanning c, s and u."""
        m = np.concatenate([bc, bs, bu], axis=2)
        minv = np.linalg.inv(m)
        kc, ks = bc.shape[2], bs.shape[2]

        def proj(lo, hi):
            return np.einsum("bik,bkj->bij", m[:, :, lo:hi], minv[:, lo:hi, :])

        n = m.shape[2]
        return cls(proj(kc, kc + ks), proj(0, kc), proj(kc + ks, n))

    @property
    def dims(self):
        r = lambda p: int(round(float(np.trace(p[0]))))
        return r(self.Pi_s), r(self.Pi_c), r(self.Pi_u)

    def projection(self, i, kind):
        p = {"s": self.Pi_s, "c": self.Pi_c, "u": self.Pi_u}[kind][i]
        n = p.shape[0]
        u, s, _ = np.linalg.svd(p)
        k = int(np.sum(s > 0.5))
        uk, sk, _ = np.linalg.svd(np.eye(n) - p)
        kk = int(np.sum(sk > 0.5))
        return ProjectionPair(Subspace(u[:, :k]), Subspace(uk[:, :kk]), p)

    def validate(self, tol=1e-10):
        n = self.Pi_s.shape[1]
        eye = np.eye(n)
        total = self.Pi_s + self.Pi_c + self.Pi_u
        err = {"sum": float(np.abs(total - eye).max())}
        for a, b in itertools.permutations(("s", "c", "u"), 2):
            pa, pb = getattr(self, "Pi_" + a), getattr(self, "Pi_" + b)
            err[a + b] = float(np.abs(pa @ pb).max())
        for a in ("s", "c", "u"):
            p = getattr(self, "Pi_" + a)
            err[a + a] = float(np.abs(p @ p - p).max())
        bad = {k: v for k, v in err.items() if v > tol * max(1.0, float(np.abs(self.Pi_c).max()))}
        if bad:
            raise ValueError(f"splitting field invalid: {bad}")
        return err


# ---------------------------------------------------------------- base atlas

@dataclass
class BaseAtlas:
    kind: str
    params: np.ndarray
    shape: tuple
    base_map: object
    embedding: object = None
    frames: object = None
    splitting: SplittingField = None
    eps1: float = 0.0
    delta0: float = 0.0
    period: float = TWO_PI
    map_index: np.ndarray = None
    checks: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return self.params.shape[0]

    @property
    def base_dim(self):
        return self.params.shape[1]

    @property
    def points(self):
        return None if self.embedding is None else self.embedding(self.params)

    @property
    def interpolation(self):
        return {"point": "none", "sampled_set": "index"}.get(self.kind, "periodic")

    def wrap(self, p):
        if self.interpolation != "periodic":
            return p
        return np.mod(p, self.period)

    def image_index(self):
        """Index of the sample nearest to the image of each sample."""
        if self.map_index is not None:
            return np.asarray(self.map_index)
        if self.interpolation == "none":
            return np.zeros(self.n_samples, dtype=int)
        img = self.wrap(self.base_map(self.params))
        d = self.params[None, :, :] - img[:, None, :]
        d = (d + self.period / 2) % self.period - self.period / 2
        return np.argmin(np.linalg.norm(d, axis=2), axis=1)

    def axes(self):
        """Sample coordinates along each base axis (periodic kinds)."""
        return [np.arange(n) * self.period / n for n in self.shape]

    def param_distance(self, a, b):
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        if self.interpolation == "periodic":
            d = (d + self.period / 2) % self.period - self.period / 2
        return d


def _periodic_params(shape):
    axes = [np.arange(n) * TWO_PI / n for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def _torus_geometry(d):
    """Embedding of T^d in R^(2d+1) with tangent, radial and extra-axis frames."""
    n = 2 * d + 1

    def embed(p):
        p = np.atleast_2d(p)
        out = np.zeros((p.shape[0], n))
        out[:, 0:2 * d:2] = np.cos(p)
        out[:, 1:2 * d:2] = np.sin(p)
        return out

    def frames(p):
        p = np.atleast_2d(p)
        b = p.shape[0]
        tc = np.zeros((b, n, d))
        rad = np.zeros((b, n, d))
        for i in range(d):
            tc[:, 2 * i, i] = -np.sin(p[:, i])
            tc[:, 2 * i + 1, i] = np.cos(p[:, i])
            rad[:, 2 * i, i] = np.cos(p[:, i])
            rad[:, 2 * i + 1, i] = np.sin(p[:, i])
        extra = np.zeros((b, n, 1))
        extra[:, -1, 0] = 1.0
        return tc, rad, extra

    return embed, frames


def build_base_sample(kind, params=None):
    """Construct an atlas and run the sampled surrogate checks.

    kinds: ``point`` (``dim``), ``circle`` (``n``, ``omega``, ``stable_normal``),
    ``torus_d`` (``d``, ``n``, ``omega``), ``sampled_set`` (``points``,
    ``params``, ``map_index``, ``frames``).
    """
    params = dict(params or {})
    if kind == "point":
        atlas = BaseAtlas("point", np.zeros((1, 0)), (), lambda p: p, eps1=math.inf, delta0=math.inf)
        atlas.checks = {"samples": 1}
        return atlas
    if kind in ("circle", "torus_d"):
        d = 1 if kind == "circle" else int(params.get("d", 2))
        n = params.get("n", 256 if d == 1 else 64)
        shape = tuple(int(v) for v in (n if np.ndim(n) else [n] * d))
        if len(shape) != d or min(shape) < 8:
            raise ValueError("torus grid must have >= 8 samples per angle")
        omega = np.broadcast_to(np.asarray(params.get("omega", 0.0), dtype=float), (d,)).copy()
        embed, frames = _torus_geometry(d)
        if kind == "circle" and params.get("stable_normal", "radial") == "binormal":
            base_frames = frames

            def frames(p):
                tc, rad, extra = base_frames(p)
                return tc, extra, rad

        p = _periodic_params(shape)
        atlas = BaseAtlas(kind, p, shape, lambda q: q + omega, embed, frames,
                          SplittingField.from_frames(*frames(p)))
        atlas.eps1 = float(params.get("eps1", 0.5))
        pts = embed(p)
        atlas.delta0 = float(_min_pair_distance(pts))
        if not atlas.delta0 > 0:
            raise ValueError("sample points are not distinct")
        atlas.splitting.validate()
        atlas.checks = _surrogate_checks(atlas)
        atlas.checks["omega"] = omega.tolist()
        return atlas
    if kind == "sampled_set":
        pts = np.atleast_2d(np.asarray(params["points"], dtype=float))
        b, n = pts.shape
        idx = np.asarray(params.get("map_index", np.arange(b)), dtype=int)
        if idx.shape != (b,) or idx.min() < 0 or idx.max() >= b:
            raise ValueError("map_index must map samples into samples")
        fr = params.get("frames")
        if fr is None:
            raise ValueError("sampled_set needs frames (Bc, Bs, Bu)")
        bc, bs, bu = (np.broadcast_to(np.asarray(f, dtype=float), (b,) + np.shape(f)[-2:]).copy() for f in fr)
        pidx = np.arange(b, dtype=float)[:, None]
        atlas = BaseAtlas("sampled_set", pidx, (b,), lambda q: idx[np.rint(q).astype(int)].astype(float),
                          embedding=lambda q: pts[np.rint(np.atleast_2d(q)[:, 0]).astype(int)],
                          frames=lambda q: tuple(f[np.rint(np.atleast_2d(q)[:, 0]).astype(int)] for f in (bc, bs, bu)),
                          splitting=SplittingField.from_frames(bc, bs, bu), map_index=idx)
        atlas.delta0 = float(_min_pair_distance(pts))
        if not atlas.delta0 > 0:
            raise ValueError("sample points are not distinct")
        atlas.splitting.validate()
        atlas.eps1 = float(params.get("eps1", 0.5))
        atlas.checks = _surrogate_checks(atlas)
        return atlas
    raise ValueError(f"unknown atlas kind {kind!r}")


def _min_pair_distance(pts):
    from scipy.spatial import cKDTree

    if pts.shape[0] < 2:
        return math.inf
    dist, _ = cKDTree(pts).query(pts, k=2)
    return dist[:, 1].min()


def _surrogate_checks(atlas, eps_list=(0.05, 0.1, 0.2)):
    from scipy.spatial import cKDTree

    pts = atlas.points
    out = {"samples": atlas.n_samples, "delta0": atlas.delta0}
    i0 = 0
    chi = {}
    for e in eps_list:
        try:
            chi[str(e)] = pretangent_defect(atlas, i0, e)
        except ValueError:
            chi[str(e)] = None
    out["chi"] = chi
    tree = cKDTree(pts)
    k = min(2 * atlas.base_dim + 1, atlas.n_samples)
    dist, nb = tree.query(pts, k=k)
    lip = 0.0
    sp = atlas.splitting
    for j in range(1, k):
        ok = dist[:, j] > 0
        for p in (sp.Pi_s, sp.Pi_c, sp.Pi_u):
            diff = np.linalg.norm(p[ok] - p[nb[ok, j]], ord=2, axis=(1, 2))
            lip = max(lip, float(np.max(diff / dist[ok, j], initial=0.0)))
    out["projection_lipschitz"] = lip
    return out


# ---------------------------------------------------------------- tubular coordinates

def _coords_in_frame(frames, v):
    bc, bs, bu = frames
    m = np.concatenate([bc, bs, bu], axis=2)
    c = np.linalg.solve(m, v[..., None])[..., 0]
    kc, ks = bc.shape[2], bs.shape[2]
    return c[:, :kc], c[:, kc:kc + ks], c[:, kc + ks:]


def tubular_coords(atlas, m0_index, ambient_point, tol=1e-13, max_iter=100):
    """Coordinates ``(x_c, y_s, y_u)`` of ambient points near sample ``m0_index``.

    Writes the point as ``phi(p) + B_s(p) y_s + B_u(p) y_u`` with ``p`` near
    the sample parameter; ``x_c = p - p0``.
    """
    if atlas.embedding is None or atlas.frames is None:
        raise ValueError("atlas has no embedding")
    z = np.atleast_2d(np.asarray(ambient_point, dtype=float))
    n = z.shape[0]
    p0 = atlas.params[m0_index]
    p = np.tile(p0, (n, 1))

    def resid(q):
        return _coords_in_frame(atlas.frames(q), z - atlas.embedding(q))[0]

    h = 1e-7
    for it in range(max_iter):
        r = resid(p)
        if np.max(np.abs(r)) <= tol:
            break
        d = p.shape[1]
        jac = np.zeros((n, d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            jac[:, :, j] = (resid(p + e) - resid(p - e)) / (2 * h)
        step = np.linalg.solve(jac, r[..., None])[..., 0]
        p = p - step
        if np.max(np.abs(step)) > atlas.period / 4:
            raise ValueError("point outside chart reach: foot-point solve does not contract")
    else:
        raise ValueError("point outside chart reach: foot-point solve did not converge")
    _, ys, yu = _coords_in_frame(atlas.frames(p), z - atlas.embedding(p))
    if np.max(np.linalg.norm(np.hstack([ys, yu]), axis=1)) > atlas.eps1:
        raise ValueError("point outside chart reach: fiber part exceeds the tube radius eps1")
    xc = atlas.param_distance(p, p0)
    return xc, ys, yu


def tubular_coords_inverse(atlas, m0_index, x_c, y_s, y_u):
    p = atlas.params[m0_index] + np.atleast_2d(np.asarray(x_c, dtype=float))
    _, bs, bu = atlas.frames(p)
    y_s = np.atleast_2d(np.asarray(y_s, dtype=float))
    y_u = np.atleast_2d(np.asarray(y_u, dtype=float))
    return atlas.embedding(p) + np.einsum("bij,bj->bi", bs, y_s) + np.einsum("bij,bj->bi", bu, y_u)


def _flat_coords(atlas, m0_index, z):
    """Coefficients of ``z - m0`` in the fixed frame at ``m0``."""
    p0 = atlas.params[m0_index][None, :]
    fr = atlas.frames(p0)
    v = np.atleast_2d(z) - atlas.embedding(p0)
    return _coords_in_frame(tuple(np.broadcast_to(f, (v.shape[0],) + f.shape[1:]) for f in fr), v)


def tube_map(atlas, m0_index, w):
    """Tubular map from flat frame coefficients at ``m0`` to ambient displacements."""
    p0 = atlas.params[m0_index]
    kc = atlas.base_dim
    fr0 = atlas.frames(p0[None, :])
    ks = fr0[1].shape[2]
    w = np.atleast_2d(w)
    return tubular_coords_inverse(atlas, m0_index, w[:, :kc], w[:, kc:kc + ks], w[:, kc + ks:]) \
        - atlas.embedding(p0[None, :])


def tube_map_lipschitz(atlas, m0_index, eps, n=2000, seed=0):
    """Sampled ``Lip(Phi - I)`` of the tubular map on the ``eps`` tube at ``m0``."""
    rng = np.random.default_rng(seed)
    p0 = atlas.params[m0_index]
    fr0 = atlas.frames(p0[None, :])
    m0 = np.concatenate(fr0, axis=2)[0]
    dim = m0.shape[1]
    a = rng.uniform(-eps, eps, (n, dim))
    b = a + rng.uniform(-eps, eps, (n, dim)) * rng.uniform(0, 1, (n, 1)) ** 2
    b = np.clip(b, -eps, eps)
    fa = tube_map(atlas, m0_index, a) - a @ m0.T
    fb = tube_map(atlas, m0_index, b) - b @ m0.T
    num = np.linalg.norm(fa - fb, axis=1)
    den = np.linalg.norm((a - b) @ m0.T, axis=1)
    ok = den > 1e-14
    return float(np.max(num[ok] / den[ok]))


# ---------------------------------------------------------------- μ-Lip and pre-tangent checks

def mu_lip_check(points, splitting, mu, tol=1e-12, max_witnesses=20):
    """Check ``|Pi_u D| <= mu * max(|Pi_c D|, |Pi_s D|)`` for all pairs of points.

    ``splitting`` is ``(Pi_s, Pi_c, Pi_u)`` as matrices.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] < 2:
        raise ValueError("need at least two points")
    ps, pc, pu = (np.asarray(p, dtype=float) for p in splitting)
    i, j = np.triu_indices(pts.shape[0], 1)
    d = pts[i] - pts[j]
    nu = np.linalg.norm(d @ pu.T, axis=1)
    ncs = np.maximum(np.linalg.norm(d @ pc.T, axis=1), np.linalg.norm(d @ ps.T, axis=1))
    bad = np.flatnonzero(nu > mu * ncs + tol * (1.0 + nu))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(ncs > 0, nu / np.where(ncs > 0, ncs, 1.0), np.where(nu > 0, np.inf, 0.0))
    viol = [{"i": int(i[k]), "j": int(j[k]), "u_part": float(nu[k]), "cs_part": float(ncs[k])}
            for k in bad[:max_witnesses]]
    return ConditionReport(not viol, viol, {"mu_measured": float(np.max(ratios))},
                           {"mu": float(mu), "pairs": int(d.shape[0]), "violations": int(bad.size)})


def pretangent_defect(atlas, m0_index, eps):
    """Sup over sample pairs within ``eps`` of ``m0`` of ``|D - Pi_c D| / |D|``."""
    pts = atlas.points
    m0 = pts[m0_index]
    near = np.flatnonzero(np.linalg.norm(pts - m0, axis=1) <= eps)
    if near.size < 2:
        raise ValueError("insufficient samples within eps")
    pc = atlas.splitting.Pi_c[m0_index]
    q = pts[near]
    i, j = np.triu_indices(q.shape[0], 1)
    d = q[i] - q[j]
    nd = np.linalg.norm(d, axis=1)
    return float(np.max(np.linalg.norm(d - d @ pc.T, axis=1) / nd))


def coordinate_change_constant(atlas, m0_index, eps, n=1000, seed=0):
    """Smallest sampled chi with ``|dx^k_hat| <= (1+chi)|dx^k| + chi * (others)``.

    Compares flat coordinates at ``m0`` with tubular coordinates.
    """
    rng = np.random.default_rng(seed)
    p0 = atlas.params[m0_index]
    dim = sum(f.shape[2] for f in atlas.frames(p0[None, :]))
    a = rng.uniform(-eps, eps, (n, dim))
    b = np.clip(a + rng.normal(0, eps / 4, (n, dim)), -eps, eps)
    m0 = atlas.embedding(p0[None, :])
    za = tubular_coords_inverse(atlas, m0_index, *_split(atlas, a)) - m0
    zb = tubular_coords_inverse(atlas, m0_index, *_split(atlas, b)) - m0
    fa = np.hstack(_flat_coords(atlas, m0_index, za + m0))
    fb = np.hstack(_flat_coords(atlas, m0_index, zb + m0))
    blocks = _blocks(atlas)
    chi = 0.0
    for lo, hi in blocks:
        tub = np.linalg.norm(a[:, lo:hi] - b[:, lo:hi], axis=1)
        flat = np.linalg.norm(fa[:, lo:hi] - fb[:, lo:hi], axis=1)
        other = sum(np.linalg.norm(a[:, l2:h2] - b[:, l2:h2], axis=1) for l2, h2 in blocks if l2 != lo)
        # flat <= (1+chi) tub + chi other  <=>  chi >= (flat - tub) / (tub + other)
        chi = max(chi, float(np.max((flat - tub) / np.maximum(tub + other, 1e-300))))
    return chi


def _blocks(atlas):
    fr = atlas.frames(atlas.params[:1])
    ks = [f.shape[2] for f in fr]
    edges = np.cumsum([0] + ks)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(3)]


def _split(atlas, w):
    (a, b), (c, d), (e, f) = _blocks(atlas)
    return w[:, a:b], w[:, c:d], w[:, e:f]


# ---------------------------------------------------------------- fiber grid and interpolation

@dataclass
class FiberGrid:
    """Regular box grid over the (center, stable) fiber.

    ``radii`` has one entry per fiber axis; the first ``center_dim`` axes are
    center directions.
    """

    radii: np.ndarray
    nodes: tuple
    center_dim: int = 0

    def __post_init__(self):
        self.radii = np.atleast_1d(np.asarray(self.radii, dtype=float))
        if np.ndim(self.nodes) == 0:
            self.nodes = (int(self.nodes),) * self.radii.size
        self.nodes = tuple(int(n) for n in self.nodes)
        if len(self.nodes) != self.radii.size:
            raise ValueError("nodes and radii disagree")

    @property
    def dim(self):
        return self.radii.size

    @property
    def shape(self):
        return self.nodes

    @property
    def size(self):
        return int(np.prod(self.nodes)) if self.nodes else 1

    def axes(self):
        return [np.linspace(-r, r, n) if n > 1 else np.zeros(1) for r, n in zip(self.radii, self.nodes)]

    @property
    def spacing(self):
        return float(max((2 * r / (n - 1) for r, n in zip(self.radii, self.nodes) if n > 1), default=0.0))

    def points(self):
        if self.dim == 0:
            return np.zeros((1, 0))
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def retract(self, z):
        """Radial retraction onto the box."""
        if self.dim == 0:
            return z
        with np.errstate(divide="ignore"):
            s = np.min(np.where(np.abs(z) > 0, self.radii / np.abs(z), np.inf), axis=1)
        return z * np.minimum(1.0, s)[:, None]

    def weighted_norm(self, z):
        """Box norm: ``max_i |z_i| / r_i`` (1 on the boundary)."""
        if self.dim == 0:
            return np.zeros(z.shape[0])
        return np.max(np.abs(z) / self.radii, axis=1)

    def center_stable_norms(self, z):
        """Euclidean norms of the center and stable parts."""
        c = np.linalg.norm(z[:, :self.center_dim], axis=1)
        s = np.linalg.norm(z[:, self.center_dim:], axis=1)
        return c, s

    def origin_index(self):
        if any(n % 2 == 0 for n in self.nodes):
            return None
        idx = tuple(n // 2 for n in self.nodes)
        return int(np.ravel_multi_index(idx, self.nodes)) if self.nodes else 0


def _cubic_stencil(ax, per, period, p):
    """Keys cubic-convolution indices and weights, arrays of shape ``(len(p), 4)``.

    Non-periodic ends use quadratic extrapolation for the ghost node, folded
    into the boundary weights, so quadratics are reproduced exactly everywhere.
    """
    n = ax.size
    h = ax[1] - ax[0]
    u = (p - ax[0]) / h
    if per:
        u = np.mod(u, period / h)
    else:
        u = np.clip(u, 0.0, n - 1.0)
    i0 = np.floor(u).astype(int)
    if not per:
        i0 = np.minimum(i0, n - 2)
    t = u - i0
    w = np.column_stack([(-t ** 3 + 2 * t ** 2 - t) / 2, (3 * t ** 3 - 5 * t ** 2 + 2) / 2,
                         (-3 * t ** 3 + 4 * t ** 2 + t) / 2, (t ** 3 - t ** 2) / 2])
    idx = i0[:, None] + np.arange(-1, 3)
    if per:
        return np.mod(idx, n), w
    # ghost f[-1] = 3 f0 - 3 f1 + f2, f[n] = 3 f[n-1] - 3 f[n-2] + f[n-3]
    lo, hi = i0 == 0, i0 == n - 2
    g = w[lo, 0]
    w[lo] = np.column_stack([np.zeros_like(g), w[lo, 1] + 3 * g, w[lo, 2] - 3 * g, w[lo, 3] + g])
    idx[lo] = [0, 0, 1, 2]
    g = w[hi, 3]
    w[hi] = np.column_stack([w[hi, 0] + g, w[hi, 1] - 3 * g, w[hi, 2] + 3 * g, np.zeros_like(g)])
    idx[hi] = [n - 3, n - 2, n - 1, n - 1]
    return idx, w


def tensor_cubic(values, axes, periodic, periods, points, chunk=2_000_000):
    """Tensor-product cubic interpolation; axes with fewer than 4 nodes are linear."""
    flat = values.reshape(-1, values.shape[-1])
    npts = points.shape[0]
    idx = np.zeros((npts, 1), dtype=np.int64)
    wts = np.ones((npts, 1))
    for a, (ax, per) in enumerate(zip(axes, periodic)):
        n = ax.size
        p = points[:, a]
        if n == 1:
            ia, wa = np.zeros((npts, 1), dtype=int), np.ones((npts, 1))
        elif n < 4:
            h = ax[1] - ax[0]
            u = np.clip((p - ax[0]) / h, 0.0, n - 1.0)
            i0 = np.minimum(np.floor(u).astype(int), n - 2)
            t = u - i0
            ia, wa = np.column_stack([i0, i0 + 1]), np.column_stack([1 - t, t])
        else:
            ia, wa = _cubic_stencil(ax, per, periods[a], p)
        # row-major flat index, built axis by axis
        idx = (idx[:, :, None] * n + ia[:, None, :]).reshape(npts, -1)
        wts = (wts[:, :, None] * wa[:, None, :]).reshape(npts, -1)
    out = np.empty((npts, flat.shape[1]))
    step = max(1, chunk // idx.shape[1])
    for lo in range(0, npts, step):
        sl = slice(lo, lo + step)
        out[sl] = np.einsum("pm,pmk->pk", wts[sl], flat[idx[sl]])
    return out


def interpolate(values, axes, periodic, periods, points, order=1):
    if order == 3 and axes:
        return tensor_cubic(values, axes, periodic, periods, points)
    return multilinear(values, axes, periodic, periods, points)


def multilinear(values, axes, periodic, periods, points):
    """Multilinear interpolation of ``values`` (shape ``(*grid, k)``) at ``points``.

    ``axes[i]`` is a uniform 1-D node array; periodic axes wrap with
    ``periods[i]``; other axes clamp to the grid.
    """
    grid_shape = values.shape[:-1]
    flat = values.reshape(-1, values.shape[-1])
    npts = points.shape[0]
    if len(axes) == 0:
        return np.broadcast_to(flat[0], (npts, flat.shape[1])).copy()
    lo_idx, hi_idx, wts = [], [], []
    for a, (ax, per) in enumerate(zip(axes, periodic)):
        n = ax.size
        p = points[:, a]
        if n == 1:
            i0 = np.zeros(npts, dtype=int)
            lo_idx.append(i0)
            hi_idx.append(i0)
            wts.append(np.zeros(npts))
            continue
        h = ax[1] - ax[0]
        u = (p - ax[0]) / h
        if per:
            u = np.mod(u, periods[a] / h)
            i0 = np.floor(u).astype(int)
            t = u - i0
            i0 = np.mod(i0, n)
            i1 = np.mod(i0 + 1, n)
        else:
            u = np.clip(u, 0.0, n - 1.0)
            i0 = np.minimum(np.floor(u).astype(int), n - 2)
            t = u - i0
            i1 = i0 + 1
        lo_idx.append(i0)
        hi_idx.append(i1)
        wts.append(t)
    strides = np.array([int(np.prod(grid_shape[a + 1:])) for a in range(len(axes))])
    out = np.zeros((npts, flat.shape[1]))
    for corner in itertools.product((0, 1), repeat=len(axes)):
        idx = np.zeros(npts, dtype=np.int64)
        w = np.ones(npts)
        for a, c in enumerate(corner):
            if c:
                idx += hi_idx[a] * strides[a]
                w = w * wts[a]
            else:
                idx += lo_idx[a] * strides[a]
                w = w * (1.0 - wts[a])
        nz = w != 0
        if np.all(nz):
            out += w[:, None] * flat[idx]
        elif np.any(nz):
            out[nz] += w[nz, None] * flat[idx[nz]]
    return out


# ---------------------------------------------------------------- sections

@dataclass
class GraphSection:
    """u-values ``values[b, node]`` of a section over the fiber grid at each base sample."""

    atlas: BaseAtlas
    grid: FiberGrid
    values: np.ndarray
    rho: float = math.inf
    meta: dict = field(default_factory=dict)
    order: int = 1

    def __post_init__(self):
        if self.order not in (1, 3):
            raise ValueError("interpolation order must be 1 or 3")
        self.values = np.asarray(self.values, dtype=float)
        b, n = self.atlas.n_samples, self.grid.size
        if self.values.ndim == 2:
            self.values = self.values[..., None]
        if self.values.shape[:2] != (b, n):
            raise ValueError(f"values shape {self.values.shape} does not match ({b}, {n}, du)")

    @property
    def du(self):
        return self.values.shape[2]

    @classmethod
    def zeros(cls, atlas, grid, du, rho=math.inf, order=1):
        return cls(atlas, grid, np.zeros((atlas.n_samples, grid.size, du)), rho, order=order)

    def with_values(self, values, **meta):
        return GraphSection(self.atlas, self.grid, values, self.rho, {**self.meta, **meta}, self.order)

    def node_points(self):
        """All ``(base params, fiber)`` node coordinates, base-major."""
        fib = self.grid.points()
        b = self.atlas.n_samples
        base = np.repeat(self.atlas.params, fib.shape[0], axis=0)
        return np.hstack([base, np.tile(fib, (b, 1))])

    def _layout(self):
        atlas = self.atlas
        mode = atlas.interpolation
        if mode == "periodic":
            base_axes = atlas.axes()
            vals = self.values.reshape(tuple(atlas.shape) + tuple(self.grid.shape) + (self.du,))
        else:
            base_axes = []
            vals = None
        return mode, base_axes, vals

    def evaluate(self, points, retract=True):
        """Section values at ``points = (base params, fiber)``, shape ``(n, db + df)``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        db = self.atlas.base_dim
        base, fib = pts[:, :db], pts[:, db:]
        if retract:
            fib = self.grid.retract(fib)
        fax = self.grid.axes()
        mode, base_axes, vals = self._layout()
        if mode == "periodic":
            axes = base_axes + fax
            periodic = [True] * len(base_axes) + [False] * len(fax)
            periods = [self.atlas.period] * len(base_axes) + [0.0] * len(fax)
            return interpolate(vals, axes, periodic, periods, np.hstack([base, fib]), self.order)
        if mode == "none":
            v = self.values[0].reshape(tuple(self.grid.shape) + (self.du,))
            return interpolate(v, fax, [False] * len(fax), [0.0] * len(fax), fib, self.order)
        idx = np.rint(base[:, 0]).astype(int)
        out = np.zeros((pts.shape[0], self.du))
        for i in np.unique(idx):
            sel = idx == i
            v = self.values[i].reshape(tuple(self.grid.shape) + (self.du,))
            out[sel] = interpolate(v, fax, [False] * len(fax), [0.0] * len(fax), fib[sel], self.order)
        return out

    def anchor_values(self):
        """``|h(m, 0)|`` per base sample."""
        pts = np.hstack([self.atlas.params, np.zeros((self.atlas.n_samples, self.grid.dim))])
        return np.linalg.norm(self.evaluate(pts), axis=1)

    def lipschitz_u(self, n_random=4000, seed=0):
        """Sampled u-direction Lipschitz constant over neighbouring and random node pairs.

        The cs displacement is measured as ``max(|base + center part|, |stable part|)``.
        """
        pts = self.node_points()
        vals = self.values.reshape(-1, self.du)
        rng = np.random.default_rng(seed)
        total = pts.shape[0]
        i = rng.integers(0, total, n_random)
        j = rng.integers(0, total, n_random)
        pairs = [(i, j)]
        # grid neighbours along every axis
        full_shape = (self.atlas.n_samples,) + tuple(self.grid.shape)
        lin = np.arange(total).reshape(full_shape)
        for ax in range(1, len(full_shape)):
            a = np.take(lin, np.arange(full_shape[ax] - 1), axis=ax).reshape(-1)
            b = np.take(lin, np.arange(1, full_shape[ax]), axis=ax).reshape(-1)
            pairs.append((a, b))
        if self.atlas.interpolation == "periodic":
            sh = tuple(self.atlas.shape) + tuple(self.grid.shape)
            lin2 = np.arange(total).reshape(sh)
            for ax in range(len(self.atlas.shape)):
                pairs.append((lin2.reshape(-1), np.roll(lin2, -1, axis=ax).reshape(-1)))
        a = np.concatenate([p[0] for p in pairs])
        b = np.concatenate([p[1] for p in pairs])
        return _u_lipschitz(self, pts[a], pts[b], vals[a], vals[b])

    def to_csv(self):
        return section_csv(self)

    def metadata(self):
        return {
            "kind": "graph_section",
            "atlas_kind": self.atlas.kind,
            "base_shape": list(self.atlas.shape),
            "fiber_radii": self.grid.radii.tolist(),
            "fiber_nodes": list(self.grid.nodes),
            "center_dim": self.grid.center_dim,
            "du": self.du,
            "rho": self.rho,
            "interpolation_order": self.order,
            **self.meta,
        }

    def write(self, prefix):
        with open(f"{prefix}.csv", "w", newline="") as fh:
            fh.write(self.to_csv())
        with open(f"{prefix}.json", "w") as fh:
            json.dump(_jsonable(self.metadata()), fh, indent=2, sort_keys=True)


def _u_lipschitz(section, pa, pb, va, vb):
    atlas, grid = section.atlas, section.grid
    db, dc = atlas.base_dim, grid.center_dim
    dbase = atlas.param_distance(pa[:, :db], pb[:, :db])
    dfc = pa[:, db:db + dc] - pb[:, db:db + dc]
    dfs = pa[:, db + dc:] - pb[:, db + dc:]
    if atlas.interpolation == "index":
        dbase = np.where(np.abs(dbase) > 0, np.inf, 0.0)
    c = np.linalg.norm(np.hstack([dbase, dfc]), axis=1)
    s = np.linalg.norm(dfs, axis=1)
    den = np.maximum(c, s)
    num = np.linalg.norm(va - vb, axis=1)
    ok = (den > 0) & np.isfinite(den)
    return float(np.max(num[ok] / den[ok], initial=0.0))


def _fmt(v):
    return "%.17g" % v


def section_csv(section):
    atlas, grid = section.atlas, section.grid
    db, df, du = atlas.base_dim, grid.dim, section.du
    header = ([f"p{i}" for i in range(db)] + [f"c{i}" for i in range(grid.center_dim)]
              + [f"s{i}" for i in range(df - grid.center_dim)] + [f"u{i}" for i in range(du)])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    pts = section.node_points()
    vals = section.values.reshape(-1, du)
    for p, v in zip(pts, vals):
        w.writerow([_fmt(x) for x in p] + [_fmt(x) for x in v])
    return buf.getvalue()


@dataclass
class LocalGraph:
    """Local representation of a section over the cs-space at one base sample."""

    sample: int
    axes: list
    values: np.ndarray
    lipschitz: float
    meta: dict = field(default_factory=dict)

    def points(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def evaluate(self, pts):
        k = self.values.shape[-1]
        v = self.values.reshape(tuple(a.size for a in self.axes) + (k,))
        return multilinear(v, self.axes, [False] * len(self.axes), [0.0] * len(self.axes), np.atleast_2d(pts))


def local_representation(h, m0_index, radius=None, nodes=9, tol=1e-12):
    """The section near ``m0`` as a graph over the cs-space of ``m0``.

    For atlases with an embedding the graph points are computed in the
    fixed frame at ``m0``; otherwise the coordinates are already flat and
    the local graph is ``(dp, x) -> h(p0 + dp, x)``.
    """
    atlas, grid = h.atlas, h.grid
    db = atlas.base_dim
    r = radius if radius is not None else (0.5 * atlas.eps1 if np.isfinite(atlas.eps1) else 0.1)
    base_axes = [np.linspace(-r, r, nodes) for _ in range(db)]
    axes = base_axes + grid.axes()
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=1) if axes else np.zeros((1, 0))
    p0 = atlas.params[m0_index]
    if atlas.embedding is None or atlas.frames is None or atlas.kind == "point":
        vals = h.evaluate(np.hstack([p0 + pts[:, :db], pts[:, db:]]))
    else:
        if grid.center_dim:
            raise ValueError("embedded local representation needs a stable-only fiber grid")
        vals = _embedded_local(h, m0_index, pts, tol)
    lip = _local_lipschitz(axes, vals)
    return LocalGraph(m0_index, axes, vals, lip, {"radius": r})


def _embedded_local(h, m0_index, pts, tol, max_iter=60):
    atlas = h.atlas
    db = atlas.base_dim
    p0 = atlas.params[m0_index]
    m0 = atlas.embedding(p0[None, :])
    n = pts.shape[0]
    target = pts  # flat (c, s) coefficients at m0

    def graph_point(q):
        p, ys = q[:, :db], q[:, db:]
        yu = h.evaluate(np.hstack([p, ys]))
        _, bs, bu = atlas.frames(p)
        return atlas.embedding(p) + np.einsum("bij,bj->bi", bs, ys) + np.einsum("bij,bj->bi", bu, yu)

    def flat(q):
        c, s, u = _flat_coords(atlas, m0_index, graph_point(q))
        return np.hstack([c, s]), u

    q = np.hstack([p0 + target[:, :db], target[:, db:]])
    hstep = 1e-7
    for _ in range(max_iter):
        f, _ = flat(q)
        r = f - target
        if np.max(np.abs(r)) <= tol:
            break
        d = q.shape[1]
        jac = np.zeros((n, d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = hstep
            jac[:, :, j] = (flat(q + e)[0] - flat(q - e)[0]) / (2 * hstep)
        q = q - np.linalg.solve(jac, r[..., None])[..., 0]
    return flat(q)[1]


def _local_lipschitz(axes, vals):
    if not axes:
        return 0.0
    shape = tuple(a.size for a in axes)
    v = vals.reshape(shape + (vals.shape[-1],))
    best = 0.0
    for i, a in enumerate(axes):
        if a.size < 2:
            continue
        dv = np.linalg.norm(np.diff(v, axis=i), axis=-1)
        best = max(best, float(dv.max() / (a[1] - a[0])))
    return best


def assemble_section(h, local_graphs):
    """Section values rebuilt from local graphs at their base samples (``x^c = 0``)."""
    out = h.values.copy()
    db = h.atlas.base_dim
    fib = h.grid.points()
    for lg in local_graphs:
        pts = np.hstack([np.zeros((fib.shape[0], db)), fib])
        out[lg.sample] = lg.evaluate(pts)
    return h.with_values(out)
