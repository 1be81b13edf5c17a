"""Complemented subspaces of R^n: gaps, projections, graph charts."""
from dataclasses import dataclass, field

import numpy as np

RANK_TOL = 1e-12


class SubspaceError(ValueError):
    pass


def _orth(basis):
    if basis.shape[1] == 0:
        return basis
    q, _ = np.linalg.qr(basis)
    return q


@dataclass(frozen=True, eq=False)
class Subspace:
    """Span of the columns of ``basis`` (shape ``(n, k)``)."""

    basis: np.ndarray
    _q: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=float)
        if b.ndim == 1:
            b = b[:, None]
        if b.ndim != 2 or b.shape[0] == 0:
            raise SubspaceError("basis must be an (n, k) array with n > 0")
        if b.shape[1] > b.shape[0]:
            raise SubspaceError("dimension exceeds ambient dimension")
        if b.shape[1]:
            norms = np.linalg.norm(b, axis=0)
            if np.any(norms == 0):
                raise SubspaceError("zero basis vector")
            s = np.linalg.svd(b / norms, compute_uv=False)
            if s[-1] <= RANK_TOL * s[0]:
                raise SubspaceError("basis vectors are linearly dependent")
        b = b.copy()
        b.setflags(write=False)
        q = _orth(b)
        q.setflags(write=False)
        object.__setattr__(self, "basis", b)
        object.__setattr__(self, "_q", q)

    @classmethod
    def span(cls, vectors):
        """Subspace spanned by a list of vectors (rows)."""
        return cls(np.atleast_2d(np.asarray(vectors, dtype=float)).T)

    @classmethod
    def zero(cls, n):
        return cls(np.zeros((n, 0)))

    @property
    def ambient_dim(self):
        return self.basis.shape[0]

    @property
    def dim(self):
        return self.basis.shape[1]

    @property
    def orthonormal(self):
        return self._q

    def project_orthogonal(self, v):
        q = self._q
        return q @ (q.T @ v)

    def contains(self, v, tol=1e-10):
        v = np.asarray(v, dtype=float)
        scale = max(1.0, float(np.max(np.abs(v), initial=0.0)))
        return bool(np.max(np.abs(v - self.project_orthogonal(v)), initial=0.0) <= tol * scale)


@dataclass(frozen=True)
class GapMetrics:
    d: float
    delta: float
    alpha: float
    dhat: float


def _check_pair(a, b):
    if a.ambient_dim != b.ambient_dim:
        raise SubspaceError(f"dimension mismatch: R^{a.ambient_dim} vs R^{b.ambient_dim}")
    if a.dim == 0 or b.dim == 0:
        raise SubspaceError("degenerate (zero-dimensional) subspace")


def _one_sided(a, b):
    # sines of the angles between unit vectors of a and the subspace b
    q_a, q_b = a.orthonormal, b.orthonormal
    resid = q_a - q_b @ (q_b.T @ q_a)
    s = np.linalg.svd(resid, compute_uv=False)
    s = np.clip(s, 0.0, 1.0)
    delta, alpha = float(s.max()), float(s.min())
    # distance from a unit x to the unit sphere of b is 2 sin(angle/2)
    if delta < 0.5:
        d = float(2.0 * np.sin(np.arcsin(delta) / 2.0))
    else:
        # arcsin is ill-conditioned near 1; use the cosine of the largest angle
        cos = np.linalg.svd(q_b.T @ q_a, compute_uv=False) if q_a.shape[1] <= q_b.shape[1] else [0.0]
        d = float(np.sqrt(2.0 - 2.0 * min(float(np.min(cos)), 1.0)))
    return d, delta, alpha


def gap_metrics(a, b):
    """Gap quantities between subspaces ``a`` and ``b`` (Euclidean norm).

    Returns ``d = sup_{x in S_a} dist(x, S_b)``, ``delta = sup_{x in S_a} dist(x, b)``,
    ``alpha = inf_{x in S_a} dist(x, b)`` and the symmetric ``dhat``.
    All are computed from principal angles, which is exact for the
    Euclidean norm; ``sampled_gap_metrics`` is the brute-force counterpart.
    """
    _check_pair(a, b)
    d_ab, delta, alpha = _one_sided(a, b)
    d_ba, _, _ = _one_sided(b, a)
    return GapMetrics(d=d_ab, delta=delta, alpha=alpha, dhat=max(d_ab, d_ba))


def sampled_gap_metrics(a, b, n_samples=4000, rng=None, refine=True):
    """Gap quantities by sampling the unit sphere of ``a`` and polishing.

    Slow; used to cross-check ``gap_metrics``.
    """
    _check_pair(a, b)
    rng = np.random.default_rng(0) if rng is None else rng
    d_ab, delta, alpha = _sampled_one_sided(a, b, n_samples, rng, refine)
    d_ba = _sampled_one_sided(b, a, n_samples, rng, refine)[0]
    return GapMetrics(d=d_ab, delta=delta, alpha=alpha, dhat=max(d_ab, d_ba))


def _sampled_one_sided(a, b, n_samples, rng, refine):
    from scipy.optimize import minimize

    qa, qb = a.orthonormal, b.orthonormal

    def unit(c):
        c = np.atleast_2d(c)
        x = c @ qa.T
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    def dist_b(x):
        return np.linalg.norm(x - (x @ qb) @ qb.T, axis=1)

    def dist_sb(x):
        p = (x @ qb) @ qb.T
        pn = np.linalg.norm(p, axis=1, keepdims=True)
        safe = np.where(pn > 0, pn, 1.0)
        y = np.where(pn > 0, p / safe, qb[:, 0][None, :])
        return np.linalg.norm(x - y, axis=1)

    c = rng.standard_normal((n_samples, a.dim))
    x = unit(c)

    def best(fun, sign):
        vals = sign * fun(x)
        i = int(np.argmin(vals))
        v = float(vals[i])
        if refine:
            res = minimize(lambda t: float(sign * fun(unit(t))[0]), c[i], method="Nelder-Mead",
                           options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
            v = min(v, float(res.fun))
        return sign * v

    return best(dist_sb, -1.0), best(dist_b, -1.0), best(dist_b, 1.0)


@dataclass(frozen=True, eq=False)
class ProjectionPair:
    range: Subspace
    kernel: Subspace
    matrix: np.ndarray

    @property
    def norm(self):
        return float(np.linalg.norm(self.matrix, 2))

    @property
    def complement(self):
        return np.eye(self.matrix.shape[0]) - self.matrix


def _complementary(a, b):
    if a.ambient_dim != b.ambient_dim:
        return False
    if a.dim + b.dim != a.ambient_dim:
        return False
    m = np.hstack([a.orthonormal, b.orthonormal])
    s = np.linalg.svd(m, compute_uv=False)
    return bool(s[-1] > RANK_TOL * s[0])


def projection_from_pair(range_, kernel):
    """Projection with the given range and kernel."""
    if not _complementary(range_, kernel):
        raise SubspaceError("not complementary")
    k = range_.dim
    m = np.hstack([range_.orthonormal, kernel.orthonormal])
    mask = np.zeros(m.shape[1])
    mask[:k] = 1.0
    p = (m * mask) @ np.linalg.inv(m)
    p.setflags(write=False)
    return ProjectionPair(range_, kernel, p)


def _coefficients(base, transversal, target):
    m = np.hstack([base.basis, transversal.basis])
    coeff = np.linalg.solve(m, target.orthonormal)
    k = base.dim
    return coeff[:k], coeff[k:]


def graph_chart(base, transversal, target):
    """Matrix ``M`` with ``target = span(base.basis + transversal.basis @ M)``.

    ``M`` acts on coordinates relative to ``base.basis`` and returns
    coordinates relative to ``transversal.basis``.
    """
    if not _complementary(base, transversal):
        raise SubspaceError("base and transversal are not complementary")
    if target.ambient_dim != base.ambient_dim or target.dim != base.dim:
        raise SubspaceError("target dimension differs from base")
    gap = gap_metrics(target, base).dhat
    alpha = gap_metrics(base, transversal).alpha
    if not gap < alpha:
        raise SubspaceError(
            f"target not transversal-complementary: dhat(target, base)={gap:.3g} >= alpha={alpha:.3g}")
    c, d = _coefficients(base, transversal, target)
    if np.linalg.svd(c, compute_uv=False)[-1] <= RANK_TOL:
        raise SubspaceError("target not transversal-complementary")
    return d @ np.linalg.inv(c)


def graph_chart_inverse(base, transversal, coeffs):
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float)).reshape(transversal.dim, base.dim)
    return Subspace(base.basis + transversal.basis @ coeffs)


def chart_norm(base, transversal, coeffs):
    """Operator norm of the chart map ``base -> transversal`` in R^n."""
    coeffs = np.asarray(coeffs, dtype=float).reshape(transversal.dim, base.dim)
    _, r = np.linalg.qr(base.basis)
    return float(np.linalg.norm(transversal.basis @ coeffs @ np.linalg.inv(r), 2))


def complement_within(sub, ambient_sub):
    """Orthogonal complement of ``sub`` inside ``ambient_sub``."""
    if sub.ambient_dim != ambient_sub.ambient_dim:
        raise SubspaceError("dimension mismatch")
    for v in sub.basis.T:
        if not ambient_sub.contains(v):
            raise SubspaceError("containment violated: sub is not inside ambient_sub")
    qa = ambient_sub.orthonormal
    if sub.dim == 0:
        return Subspace(qa)
    coords = qa.T @ sub.orthonormal
    u, s, _ = np.linalg.svd(coords, full_matrices=True)
    rank = int(np.sum(s > RANK_TOL * max(1.0, s[0])))
    rest = qa @ u[:, rank:]
    return Subspace(rest) if rest.shape[1] else Subspace.zero(sub.ambient_dim)


def identity_suite(n_pairs=200, n=6, rng=None, max_diff=0.3):
    """Worst errors of two projection identities over random complementary pairs.

    ``norm_identity``: ``|alpha(range, kernel) * |P| - 1|``.
    ``difference_excess``: ``dhat(R(P1), R(P2)) - 2 |P1 - P2|`` for nearby
    projections with ``|P1 - P2| <= max_diff``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    worst_norm, worst_excess, tested = 0.0, -np.inf, 0
    for _ in range(n_pairs):
        k = int(rng.integers(1, n))
        a = Subspace(rng.standard_normal((n, k)))
        b = Subspace(rng.standard_normal((n, n - k)))
        p = projection_from_pair(a, b)
        worst_norm = max(worst_norm, abs(gap_metrics(a, b).alpha * p.norm - 1.0))
        for scale in (1e-1, 1e-2, 1e-3):
            a2 = Subspace(a.basis + scale * rng.standard_normal(a.basis.shape))
            b2 = Subspace(b.basis + scale * rng.standard_normal(b.basis.shape))
            if not _complementary(a2, b2):
                continue
            p2 = projection_from_pair(a2, b2)
            diff = float(np.linalg.norm(p.matrix - p2.matrix, 2))
            if diff > max_diff:
                continue
            tested += 1
            worst_excess = max(worst_excess, gap_metrics(a, a2).dhat - 2.0 * diff)
    return {"pairs": n_pairs, "norm_identity": worst_norm, "difference_pairs": tested,
            "difference_excess": float(worst_excess)}
