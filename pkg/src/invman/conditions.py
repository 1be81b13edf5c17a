"""Cone-type hyperbolicity constants: derivation, empirical checks, predicates."""
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .correspondence import as_batch


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        if math.isnan(v) or math.isinf(v):
            return str(v)
        return v
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


@dataclass
class ABConstants:
    """Constants of an (A)(alpha; alpha', lambda_u)(B)(beta; beta', lambda_cs) condition.

    ``case`` is ``"A_prime"`` when ``alpha`` is a Lipschitz bound of
    ``F(x, .)`` rather than a cone opening.  Rates and openings may be
    per-base-sample arrays.
    """

    alpha: object
    alpha_prime: object
    beta: object
    beta_prime: object
    lambda_cs: object
    lambda_u: object
    varsigma0: float = 2.0
    gamma0: float = 0.0
    eta: float = 0.0
    case: str = "A"
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("alpha", "alpha_prime", "beta", "beta_prime", "lambda_cs", "lambda_u"):
            v = getattr(self, name)
            if np.ndim(v):
                v = np.asarray(v, dtype=float)
            if not np.all(np.isfinite(v)) or np.any(np.asarray(v) < 0):
                raise ValueError(f"{name} must be finite and nonnegative")
        if self.varsigma0 < 1:
            raise ValueError("varsigma0 must be >= 1")
        if np.any(np.asarray(self.alpha_prime) > np.asarray(self.alpha) * (1 + 1e-12)) and self.case == "A":
            self.notes.setdefault("flags", []).append("alpha_prime > alpha")

    @property
    def lambda_s(self):
        return self.lambda_cs

    def to_dict(self):
        return _jsonable(asdict(self))


def swap_roles(c):
    """Constants of the dual correspondence: (A) and (B) exchange roles."""
    return replace(c, alpha=c.beta, alpha_prime=c.beta_prime, beta=c.alpha, beta_prime=c.alpha_prime,
                   lambda_cs=c.lambda_u, lambda_u=c.lambda_cs, case="A", notes=dict(c.notes))


@dataclass
class ConditionReport:
    passed: bool
    violated_pairs: list
    measured_constants: object = None
    predicate_values: dict = field(default_factory=dict)

    def __post_init__(self):
        self.passed = bool(self.passed) and not self.violated_pairs

    def to_dict(self):
        mc = self.measured_constants
        if isinstance(mc, ABConstants):
            mc = mc.to_dict()
        return _jsonable({"passed": self.passed, "violated_pairs": self.violated_pairs,
                          "measured_constants": mc, "predicate_values": self.predicate_values})

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def ab_from_max_lipschitz(lam_s, alpha, beta, lam_u, varsigma0=2.0):
    """Cone constants from max-form Lipschitz bounds of ``(F, G)``.

    Returns the sharpened constants ``(A)(alpha/c; alpha, lam_u)(B)(beta/c; beta, lam_s)``
    with ``c = lam_s * lam_u`` when ``alpha * beta < c``; they imply the plain ones.
    """
    if not alpha * beta < 1:
        raise ValueError(f"alpha*beta >= 1 ({alpha * beta:.6g})")
    if not lam_s * lam_u < 1:
        raise ValueError(f"lambda_s*lambda_u >= 1 ({lam_s * lam_u:.6g})")
    c = lam_s * lam_u
    if alpha * beta < c and c > 0:
        return ABConstants(alpha / c, alpha, beta / c, beta, lam_s, lam_u, varsigma0,
                           notes={"sharpened": True, "c": c})
    return ABConstants(alpha, alpha, beta, beta, lam_s, lam_u, varsigma0, notes={"sharpened": False})


def ab_from_additive_lipschitz(alpha_t, beta_t, lam_s_t, lam_u_t, c=1.0, varsigma0=2.0):
    """Cone constants ``(A)(alpha; c alpha, lambda_u)(B)(beta; c beta, lambda_s)`` from
    the Lipschitz bounds ``Lip F(x,.) <= alpha_t``, ``Lip G(.,y) <= beta_t``,
    ``Lip F(.,y) <= lam_s_t``, ``Lip G(x,.) <= lam_u_t``.
    """
    if not 0 < c <= 1:
        raise ValueError("c must lie in (0, 1]")
    if not lam_s_t * lam_u_t < c * c:
        raise ValueError(f"lambda_s~*lambda_u~ < c^2 fails ({lam_s_t * lam_u_t:.6g} >= {c * c:.6g})")
    gap = (c - math.sqrt(lam_s_t * lam_u_t)) ** 2
    if not alpha_t * beta_t < gap:
        raise ValueError(
            f"alpha~*beta~ < (c - sqrt(lambda_s~*lambda_u~))^2 fails ({alpha_t * beta_t:.6g} >= {gap:.6g})")
    b = c - lam_s_t * lam_u_t + alpha_t * beta_t
    disc = b * b - 4.0 * c * alpha_t * beta_t
    if disc < 0:
        raise ArithmeticError("negative discriminant in cone constants")
    # smaller root of c beta~ a^2 - b a + alpha~ = 0, the exact requirement for the
    # (A) conclusion with opening c*a; rationalized so beta~ -> 0 needs no 0/0
    root = b + math.sqrt(disc)
    alpha = 2.0 * alpha_t / root
    beta = 2.0 * beta_t / root
    lam_s = lam_s_t / (1.0 - alpha * beta_t)
    lam_u = lam_u_t / (1.0 - beta * alpha_t)
    if not (alpha * beta < 1 and lam_s * lam_u < 1):
        raise ArithmeticError("post-check alpha*beta < 1, lambda_s*lambda_u < 1 failed")
    return ABConstants(alpha, c * alpha, beta, c * beta, lam_s, lam_u, varsigma0,
                       notes={"c": c, "b": b})


def max_form_from_additive(lip_main, lip_cross, opening):
    """Rate ``r`` with ``a|u| + b|v| <= max(r|u|, opening|v|)`` for all ``u, v``.

    Needs ``opening > b``; then ``r = a / (1 - b / opening)``.
    """
    if lip_cross == 0:
        return lip_main
    if not opening > lip_cross:
        return math.inf
    return lip_main / (1.0 - lip_cross / opening)


def _margin(rep):
    vals = rep.predicate_values
    m = math.inf
    for v in vals.values():
        if not isinstance(v, dict) or "lhs" not in v:
            continue
        lhs, rhs, op = v["lhs"], v["rhs"], v["op"]
        if op == "<":
            m = min(m, (rhs - lhs) / max(abs(rhs), 1e-300))
        else:
            m = min(m, (lhs - rhs) / max(abs(lhs), 1e-300))
    return m


def derive_ab_constants(alpha_t, beta_t, lam_s_t, lam_u_t, varsigma0=2.0, mode="dichotomy", floor=1e-6):
    """Pick cone constants passing the predicates from measured Lipschitz data.

    Tries the max-form route (with free openings above the cross Lipschitz
    constants) and the additive route over a grid of ``c``; returns the
    passing candidate with the smallest openings (ties broken by margin),
    or the largest margin when nothing passes.
    """
    cands = []
    mults = np.geomspace(1.01, 1e6, 40)
    for ka in mults:
        a = max(ka * alpha_t, floor)
        lam_s = max_form_from_additive(lam_s_t, alpha_t, a)
        for kb in mults:
            bb = max(kb * beta_t, floor)
            lam_u = max_form_from_additive(lam_u_t, beta_t, bb)
            if not (np.isfinite(lam_s) and np.isfinite(lam_u)):
                continue
            try:
                cc = ab_from_max_lipschitz(lam_s, a, bb, lam_u, varsigma0)
            except ValueError:
                continue
            cands.append(replace(cc, notes={**cc.notes, "route": "max-form"}))
            # (A') form: alpha is the Lipschitz bound of F(x, .)
            cands.append(replace(cc, alpha=a, alpha_prime=a, case="A_prime",
                                 notes={**cc.notes, "route": "max-form A'"}))
    lo = math.sqrt(lam_s_t * lam_u_t) + math.sqrt(alpha_t * beta_t)
    for c in np.linspace(lo, 1.0, 60)[1:]:
        try:
            cc = ab_from_additive_lipschitz(alpha_t, beta_t, lam_s_t, lam_u_t, float(c), varsigma0)
        except (ValueError, ArithmeticError):
            continue
        cands.append(replace(cc, notes={**cc.notes, "route": "additive"}))
        cands.append(replace(cc, alpha=alpha_t, alpha_prime=alpha_t, lambda_u=lam_u_t, case="A_prime",
                             notes={**cc.notes, "route": "additive A'"}))
    if not cands:
        raise ValueError("no cone constants consistent with these Lipschitz bounds")
    best, best_key = None, None
    for cc in cands:
        rep = check_hyperbolicity_predicates(cc, mode)
        m = _margin(rep)
        if rep.passed:
            key = (1, -(float(np.max(cc.alpha_prime)) + float(np.max(cc.beta_prime))), m)
        else:
            key = (0, m, 0.0)
        if best_key is None or key > best_key:
            best, best_key = cc, key
    best.notes["lipschitz_inputs"] = {"alpha_t": alpha_t, "beta_t": beta_t,
                                      "lam_s_t": lam_s_t, "lam_u_t": lam_u_t}
    return best


# ---------------------------------------------------------------- empirical checks

def _norm(v):
    return np.linalg.norm(v, axis=1)


def _implications(dx1, dy1, dx2, dy2, c, rtol, atol):
    """Evaluate the four implications; return hypotheses masks and conclusion checks."""
    alpha, alpha_p, beta, beta_p = c.alpha, c.alpha_prime, c.beta, c.beta_prime
    lam_u, lam_s = c.lambda_u, c.lambda_cs
    slack = lambda lhs, rhs: lhs <= rhs * (1.0 + rtol) + atol
    if c.case == "A_prime":
        # (A') bounds Lipschitz constants in the second slot: only pairs sharing x1 apply
        hyp_a = dx1 == 0.0
    else:
        hyp_a = dx1 <= alpha * dy1 * (1.0 + rtol)
    hyp_b = dy2 <= beta * dx2 * (1.0 + rtol)
    out = {
        "A1": (hyp_a, dx2, alpha_p * dy2, slack(dx2, alpha_p * dy2)),
        "A2": (hyp_a, dy1, lam_u * dy2, slack(dy1, lam_u * dy2)),
        "B1": (hyp_b, dy1, beta_p * dx1, slack(dy1, beta_p * dx1)),
        "B2": (hyp_b, dx2, lam_s * dx1, slack(dx2, lam_s * dx1)),
    }
    return out


def _ratio_sup(num, den, mask):
    sel = mask & (num > 0)
    if not np.any(sel):
        return 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(den[sel] > 0, num[sel] / np.where(den[sel] > 0, den[sel], 1.0), np.inf)
    return float(np.max(r))


def _evaluate_pairs(dx1, dy1, dx2, dy2, c, rtol, atol, witnesses, max_witnesses=20):
    res = _implications(dx1, dy1, dx2, dy2, c, rtol, atol)
    violated = []
    counts = {}
    for name, (hyp, lhs, rhs, ok) in res.items():
        bad = np.flatnonzero(hyp & ~ok)
        counts[name] = {"hypothesis_pairs": int(hyp.sum()), "violations": int(bad.size)}
        for i in bad[:max_witnesses]:
            violated.append({"condition": name, "index": int(i), "lhs": float(lhs[i]), "rhs": float(rhs[i]),
                             **witnesses(int(i))})
    measured = ABConstants(
        alpha=c.alpha, alpha_prime=_finite(_ratio_sup(dx2, dy2, res["A1"][0])),
        beta=c.beta, beta_prime=_finite(_ratio_sup(dy1, dx1, res["B1"][0])),
        lambda_cs=_finite(_ratio_sup(dx2, dx1, res["B2"][0])),
        lambda_u=_finite(_ratio_sup(dy1, dy2, res["A2"][0])),
        varsigma0=c.varsigma0, case=c.case)
    return violated, counts, measured


def _finite(v):
    return v if np.isfinite(v) else 1e300


def graph_pair_sampler(radius_x, radius_z, dims, near_scale=1e-3):
    """Sampler of generator pairs ``(x1, z2), (x1', z2')`` in the balls.

    Mixes independent pairs, nearby pairs, and pairs differing only in
    ``x1`` or only in ``z2`` so that degenerate cone hypotheses get tested.
    """
    dx, dz = dims

    def ball(rng, n, d, r):
        v = rng.standard_normal((n, d))
        v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
        return v * r * rng.uniform(0, 1, (n, 1)) ** (1.0 / max(d, 1))

    def sample(rng, n):
        x1, z2 = ball(rng, n, dx, radius_x), ball(rng, n, dz, radius_z)
        kind = rng.integers(0, 4, n)
        x1b, z2b = ball(rng, n, dx, radius_x), ball(rng, n, dz, radius_z)
        near = kind == 1
        x1b[near] = x1[near] + near_scale * ball(rng, int(near.sum()), dx, radius_x)
        z2b[near] = z2[near] + near_scale * ball(rng, int(near.sum()), dz, radius_z)
        only_z = kind == 2
        x1b[only_z] = x1[only_z]
        only_x = kind == 3
        z2b[only_x] = z2[only_x]
        # directional pairs along random slopes, hitting cone boundaries
        return x1, z2, x1b, z2b

    return sample


def check_ab_empirical(h, c, sampler=None, n_pairs=10_000, rng=None, rtol=1e-9, atol=1e-13):
    """Test the (A)(B) implications on sampled pairs of graph points of ``h``."""
    if n_pairs < 10_000:
        raise ValueError("at least 10^4 pairs are required")
    rng = np.random.default_rng(0) if rng is None else rng
    dx, dz = h.dims
    if sampler is None:
        r = min(h.pair.dom_x_radius, 1.0), min(h.pair.dom_z_radius, 1.0)
        sampler = graph_pair_sampler(r[0], r[1], h.dims)
    x1, z2, x1b, z2b = (as_batch(v, d) for v, d in zip(sampler(rng, n_pairs), (dx, dz, dx, dz)))
    x2, y1 = h.pair.evaluate(x1, z2)
    x2b, y1b = h.pair.evaluate(x1b, z2b)
    dx1, dy1 = _norm(x1 - x1b), _norm(y1 - y1b)
    dx2, dy2 = _norm(x2 - x2b), _norm(z2 - z2b)

    def witness(i):
        return {"x1": x1[i], "y2": z2[i], "x1_other": x1b[i], "y2_other": z2b[i]}

    violated, counts, measured = _evaluate_pairs(dx1, dy1, dx2, dy2, c, rtol, atol, witness)
    return ConditionReport(not violated, violated, measured,
                           {"pairs": int(len(dx1)), "implications": counts})


def check_cone_linearized(h, c, points, n_directions=4000, rng=None, rtol=1e-9):
    """Check (A) for the linearized pair at each point and ``|D_1 G| <= beta``."""
    rng = np.random.default_rng(1) if rng is None else rng
    dx, dz = h.dims
    xs, zs = points
    xs, zs = as_batch(xs, dx), as_batch(zs, dz)
    df, dg = h.pair.jacobians(xs, zs)
    if df is None or dg is None:
        raise ValueError("missing derivatives")
    p = rng.standard_normal((n_directions, dx))
    q = rng.standard_normal((n_directions, dz))
    # add directions on the boundary of the hypothesis cone
    scale = rng.uniform(0.0, 2.0, (n_directions, 1))
    q = q * scale
    violated = []
    d1g_norms = np.linalg.norm(dg[:, :, :dx], 2, axis=(1, 2))
    worst = {"A1": 0.0, "A2": 0.0}
    for k in range(xs.shape[0]):
        dir_ = np.hstack([p, q])
        ddx2 = dir_ @ df[k].T
        ddy1 = dir_ @ dg[k].T
        dx1, dy1, dx2, dy2 = _norm(p), _norm(ddy1), _norm(ddx2), _norm(q)
        hyp = dx1 <= c.alpha * dy1
        for name, lhs, rhs in (("A1", dx2, c.alpha_prime * dy2), ("A2", dy1, c.lambda_u * dy2)):
            bad = np.flatnonzero(hyp & (lhs > rhs * (1 + rtol) + 1e-14))
            if bad.size:
                i = int(bad[0])
                violated.append({"condition": name, "point": k, "x": xs[k], "z": zs[k],
                                 "direction": dir_[i], "lhs": float(lhs[i]), "rhs": float(rhs[i])})
            sel = hyp & (dy2 > 0)
            if np.any(sel):
                worst[name] = max(worst[name], float(np.max(lhs[sel] / dy2[sel])))
        if d1g_norms[k] > c.beta * (1 + rtol):
            violated.append({"condition": "D1G", "point": k, "x": xs[k], "z": zs[k],
                             "lhs": float(d1g_norms[k]), "rhs": float(c.beta)})
    measured = ABConstants(c.alpha, worst["A1"], float(d1g_norms.max(initial=0.0)), c.beta_prime,
                           c.lambda_cs, worst["A2"], c.varsigma0)
    return ConditionReport(not violated, violated, measured,
                           {"points": int(xs.shape[0]), "directions": n_directions,
                            "max_D1G": float(d1g_norms.max(initial=0.0)),
                            "alpha_beta_below_half": bool(np.max(np.asarray(c.alpha * c.beta)) < 0.5)})


# ---------------------------------------------------------------- predicates

def _at_image(v, index):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        return v
    if index is None:
        return np.full_like(v, v.max())
    return v[np.asarray(index)]


def _pred(lhs, op, rhs):
    lhs, rhs = float(lhs), float(rhs)
    ok = lhs < rhs if op == "<" else lhs > rhs
    return {"lhs": lhs, "op": op, "rhs": rhs, "passed": bool(ok)}


def check_hyperbolicity_predicates(c, mode="dichotomy", c_cu=None, base_map_index=None):
    """Angle, spectral and gap predicates for cs-direction constants ``c``.

    ``mode`` is ``dichotomy``, ``smooth`` (adds the spectral gap) or
    ``trichotomy`` (needs ``c_cu``, the constants of the s/cu split in the
    cu direction).  ``base_map_index[i]`` is the sample index of the image of
    sample ``i``; without it the worst value over all samples is used.
    """
    s0 = c.varsigma0
    preds = {}
    if mode in ("dichotomy", "smooth"):
        a = np.asarray(c.alpha, dtype=float)
        bp_u = _at_image(c.beta_prime, base_map_index)
        ab = a * bp_u
        preds["angle_alpha_beta"] = _pred(np.max(ab), "<", 1.0 / (2.0 * s0))
        preds["angle_beta_margin"] = _pred(np.min(np.asarray(c.beta) - s0 * bp_u), ">", 0.0)
        if c.case == "A_prime":
            with np.errstate(divide="ignore"):
                theta = np.where(1.0 - s0 * ab > 0, 1.0 / (1.0 - s0 * ab), np.inf)
        else:
            theta = np.ones_like(ab)
        preds["theta"] = {"value": float(np.max(theta))}
        preds["spectral"] = _pred(np.max(np.asarray(c.lambda_u) * theta), "<", 1.0)
        if mode == "smooth":
            preds["spectral_gap"] = _pred(np.max(np.asarray(c.lambda_cs) * np.asarray(c.lambda_u) * theta),
                                          "<", 1.0)
    elif mode == "trichotomy":
        if c_cu is None:
            raise ValueError("trichotomy mode needs the cu-direction constants")
        preds["angle_cs"] = _pred(np.max(np.asarray(c.alpha_prime) * _at_image(c.beta_prime, base_map_index)),
                                  "<", 1.0 / (2.0 * s0))
        preds["angle_cu"] = _pred(np.max(np.asarray(c_cu.alpha_prime) * _at_image(c_cu.beta_prime, base_map_index)),
                                  "<", 1.0 / (2.0 * s0))
        preds["angle_alpha_cu_margin"] = _pred(
            np.min(_at_image(c_cu.alpha, base_map_index) - s0 * np.asarray(c_cu.alpha_prime)), ">", 0.0)
        preds["angle_beta_cs_margin"] = _pred(
            np.min(np.asarray(c.beta) - s0 * _at_image(c.beta_prime, base_map_index)), ">", 0.0)
        preds["angle_cross"] = _pred(np.max(np.asarray(c_cu.alpha) * np.asarray(c.beta)), "<", 1.0)
        preds["spectral_s"] = _pred(np.max(c_cu.lambda_cs), "<", 1.0)
        preds["spectral_u"] = _pred(np.max(c.lambda_u), "<", 1.0)
        preds["spectral_gap_cs"] = _pred(np.max(np.asarray(c.lambda_cs) * np.asarray(c.lambda_u)), "<", 1.0)
        preds["spectral_gap_cu"] = _pred(np.max(np.asarray(c_cu.lambda_u) * np.asarray(c_cu.lambda_cs)), "<", 1.0)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    failed = [{"predicate": k, **v} for k, v in preds.items() if isinstance(v, dict) and v.get("passed") is False]
    return ConditionReport(not failed, failed, c, preds)


# ---------------------------------------------------------------- Lipschitz estimates

@dataclass
class LipschitzEstimate:
    value: float
    x: object
    y: object

    def __float__(self):
        return float(self.value)


def estimate_lipschitz_constants(f, ball, samples=1000, seed=0, block=256):
    """Sup of difference quotients of ``f`` over sampled pairs in ``ball``.

    ``ball`` is ``(center, radius)``; ``f`` maps ``(n, d)`` to ``(n, k)``.
    Pairs come in fixed seeded blocks, so the estimate only grows with
    ``samples``.
    """
    if samples < 1000:
        raise ValueError("at least 10^3 sample pairs are required")
    center, radius = ball
    center = np.atleast_1d(np.asarray(center, dtype=float))
    d = center.shape[0]
    fb = lambda p: np.asarray(f(p), dtype=float).reshape(p.shape[0], -1)
    best = LipschitzEstimate(0.0, center, center)
    done = 0
    b = 0
    while done < samples:
        n = min(block, samples - done)
        rng = np.random.default_rng([seed, b])
        x = center + radius * rng.uniform(-1, 1, (block, d))
        y = center + radius * rng.uniform(-1, 1, (block, d))
        near = np.arange(block) % 2 == 1
        y[near] = x[near] + radius * 1e-3 * rng.uniform(-1, 1, (int(near.sum()), d))
        y = np.clip(y, center - radius, center + radius)
        x, y = x[:n], y[:n]
        dxn = np.linalg.norm(x - y, axis=1)
        dfn = np.linalg.norm(fb(x) - fb(y), axis=1)
        ok = dxn > 0
        q = np.where(ok, dfn / np.where(ok, dxn, 1.0), 0.0)
        i = int(np.argmax(q))
        if q[i] > best.value:
            best = LipschitzEstimate(float(q[i]), x[i], y[i])
        done += n
        b += 1
    return best


def pair_lipschitz_data(h, radius_x, radius_z, n=2000, rng=None):
    """Sup of Jacobian block norms of a generating pair over the balls.

    Returns ``(alpha_t, beta_t, lam_s_t, lam_u_t)`` = bounds on
    ``Lip F(x,.)``, ``Lip G(.,y)``, ``Lip F(.,y)``, ``Lip G(x,.)``.
    """
    rng = np.random.default_rng(3) if rng is None else rng
    dx, dz = h.dims
    xs = rng.uniform(-1, 1, (n, dx)) * np.asarray(radius_x, dtype=float)
    zs = rng.uniform(-1, 1, (n, dz)) * np.asarray(radius_z, dtype=float)
    xs = np.vstack([np.zeros((1, dx)), xs])
    zs = np.vstack([np.zeros((1, dz)), zs])
    df, dg = h.pair.jacobians(xs, zs)
    nrm = lambda m: float(np.linalg.norm(m, 2, axis=(1, 2)).max()) if m.shape[1] and m.shape[2] else 0.0
    return nrm(df[:, :, dx:]), nrm(dg[:, :, :dx]), nrm(df[:, :, :dx]), nrm(dg[:, :, dx:])
