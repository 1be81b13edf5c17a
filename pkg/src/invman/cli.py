"""Command-line front end: config validation, pipeline orchestration and export.

Exit codes: 0 all assertions passed, 1 an assertion failed, 2 invalid
config or arguments, 3 a pipeline step raised (module and node in the
message).
"""
import argparse
import json
import logging
import os
import sys

import jsonschema
import numpy as np

from . import __version__
from .conditions import _jsonable, check_ab_empirical, check_hyperbolicity_predicates
from .correspondence import HypothesisError
from .grassmann import identity_suite
from .graph_transform import TransformConfig, estimate_contraction, iterate
from .systems import SYSTEMS, build_system, direct_cu_problem, strong_stable_fiber
from .tangent_transform import iterate_tangent
from .trichotomy import (OrbitSegment, center_bi_invariance, classify_orbit, compute_cs, compute_cu_via_dual,
                         generate_orbit, intersect_center)

log = logging.getLogger("invman")

SCHEMA_VERSION = 1
PRODUCTS = ("conditions", "cs", "cu", "center", "tangent", "fibers", "orbits")
DEPENDS = {"center": ("cs", "cu"), "tangent": ("cs",), "orbits": ("cs",)}

_transform_props = {
    "sigma": {"type": "number", "exclusiveMinimum": 0},
    "rho": {"type": "number", "exclusiveMinimum": 0},
    "eps": {"type": "number", "exclusiveMinimum": 0},
    "eps0": {"type": "number", "exclusiveMinimum": 0},
    "eta1": {"type": "number", "exclusiveMinimum": 0},
    "eta2": {"type": "number", "exclusiveMinimum": 0},
    "varsigma0": {"type": "number", "exclusiveMinimum": 1},
    "mode": {"enum": ["general", "invariant", "strong_s_contraction", "strictly_inflowing"]},
    "smooth": {"type": "boolean"},
    "nodes": {"oneOf": [{"type": "integer", "minimum": 1},
                        {"type": "array", "items": {"type": "integer", "minimum": 1}}]},
    "tol_fixed_point": {"type": "number", "exclusiveMinimum": 0},
    "tol_section": {"type": "number", "exclusiveMinimum": 0},
    "max_sweeps": {"type": "integer", "minimum": 1},
    "threads": {"type": "integer", "minimum": 1},
    "interpolation": {"enum": ["auto", "linear", "cubic"]},
    "eps_star": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "c_star": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "system"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "system": {
            "type": "object",
            "required": ["name"],
            "additionalProperties": False,
            "properties": {"name": {"enum": sorted(SYSTEMS)}, "params": {"type": "object"}},
        },
        "products": {"type": "array", "items": {"enum": list(PRODUCTS)}, "uniqueItems": True},
        "transform": {"type": "object", "additionalProperties": False, "properties": _transform_props},
        "transform_cu": {"type": "object", "additionalProperties": False, "properties": _transform_props},
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string"},
        "conditions": {
            "type": "object", "additionalProperties": False,
            "properties": {"pairs": {"type": "integer", "minimum": 10000}},
        },
        "orbits": {
            "type": "object", "additionalProperties": False,
            "properties": {"count": {"type": "integer", "minimum": 1},
                           "steps": {"type": "integer", "minimum": 1},
                           "method": {"enum": ["graph", "exact"]},
                           "tol": {"type": "number", "exclusiveMinimum": 0}},
        },
        "fibers": {
            "type": "object", "additionalProperties": False,
            "properties": {"theta": {"type": "array", "items": {"type": "number"}},
                           "radius": {"type": "number", "exclusiveMinimum": 0},
                           "nodes": {"type": "integer", "minimum": 2},
                           "steps": {"type": "integer", "minimum": 1}},
        },
        "center": {
            "type": "object", "additionalProperties": False,
            "properties": {"points": {"type": "integer", "minimum": 1}},
        },
    },
}


class ConfigError(ValueError):
    pass


def validate_config(cfg):
    """Raise ``ConfigError`` listing every schema violation with its JSON pointer."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{_pointer(e.absolute_path)}: {e.message}" for e in errors]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))
    for key in ("transform", "transform_cu"):
        if key in cfg:
            try:
                TransformConfig.from_dict(cfg[key])
            except ValueError as exc:
                raise ConfigError(f"/{key}: {exc}") from None


def _pointer(path):
    parts = [str(p).replace("~", "~0").replace("/", "~1") for p in path]
    return "/" + "/".join(parts) if parts else "/"


def resolve_products(requested):
    out = set(requested)
    for p in list(out):
        out.update(DEPENDS.get(p, ()))
    return [p for p in PRODUCTS if p in out]


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    validate_config(cfg)
    return cfg


def _transform(cfg, key, threads):
    d = dict(cfg.get(key, cfg.get("transform", {})))
    if threads is not None:
        d["threads"] = threads
    return TransformConfig.from_dict(d)


class Run:
    """One pipeline execution; collects the report and the pass/fail assertions."""

    def __init__(self, cfg, out, seed, threads=None, strict=False):
        self.cfg = cfg
        self.out = out
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.strict = strict
        self.report = {"schema_version": SCHEMA_VERSION, "version": __version__, "seed": seed,
                       "system": cfg["system"], "assertions": {}}
        self.tcs = _transform(cfg, "transform", threads)
        self.tcu = _transform(cfg, "transform_cu", threads)
        self.report["transform"] = self.tcs.to_dict()
        self.report["transform_cu"] = self.tcu.to_dict()
        self.spec = None
        self.results = {}

    def assert_(self, name, ok, detail=None):
        self.report["assertions"][name] = {"passed": bool(ok), "detail": _jsonable(detail)}
        if not ok:
            log.warning("assertion failed: %s", name)
            if self.strict:
                raise AssertionError(name)

    def path(self, name):
        return os.path.join(self.out, name)

    @property
    def passed(self):
        return all(a["passed"] for a in self.report["assertions"].values())

    def system(self):
        if self.spec is None:
            s = self.cfg["system"]
            self.spec = build_system(s["name"], s.get("params", {}))
        return self.spec

    # products ------------------------------------------------------------
    def conditions(self):
        spec = self.system()
        n = self.cfg.get("conditions", {}).get("pairs", 10_000)
        pred = check_hyperbolicity_predicates(spec.constants, "dichotomy")
        emp = check_ab_empirical(spec.cs_handle, spec.constants, n_pairs=n, rng=self.rng)
        self.report["conditions"] = {"constants": spec.constants.to_dict(), "predicates": pred.to_dict(),
                                     "empirical": emp.to_dict()}
        self.assert_("conditions.empirical", emp.passed, {"violations": len(emp.violated_pairs)})

    def _section_report(self, key, h, rep, problem, cfg):
        truth = problem.truth
        if truth is not None:
            # the bump only leaves the core untouched
            pts = h.node_points()
            fib = pts[:, problem.base_dim:]
            core = np.ones(len(pts), dtype=bool)
            if cfg.mode != "strictly_inflowing":
                core = np.abs(fib).max(axis=1, initial=0.0) <= cfg.eta2
            err = np.abs(h.values.reshape(-1, h.du) - truth(pts))[core]
            rep["truth_error"] = float(err.max(initial=0.0))
        rep["contraction_estimate"] = estimate_contraction(problem, cfg, trials=2, seed=self.seed)
        self.report[key] = rep
        h.write(self.path(key))
        self.assert_(f"{key}.converged", rep["converged"])
        self.assert_(f"{key}.conformance", rep["conformance"],
                     {"ratios": rep["ratios"], "bound": rep["lambda_hat_bound"]})
        self.assert_(f"{key}.representation", rep["representation"].get("passed", True),
                     rep["representation"])

    def cs(self):
        spec = self.system()
        h, rep = compute_cs(spec, self.tcs)
        self.results["cs"] = h
        self._section_report("cs", h, rep, spec.cs_problem(), self.tcs)

    def cu(self):
        spec = self.system()
        h, rep = compute_cu_via_dual(spec, self.tcu)
        self.results["cu"] = h
        if spec.name == "linear_block":
            hd, _ = iterate(direct_cu_problem(spec), self.tcu)
            rep["direct_difference"] = float(np.abs(hd.values - h.values).max(initial=0.0))
            self.assert_("cu.dual_matches_direct", rep["direct_difference"] <= 1e-10, rep["direct_difference"])
        self._section_report("cu", h, rep, spec.cu_problem(), self.tcu)

    def center(self):
        spec = self.system()
        tri = intersect_center(self.results["cs"], self.results["cu"])
        n = self.cfg.get("center", {}).get("points", 100)
        bi = center_bi_invariance(spec, tri, self.tcs, self.tcu, n=n, seed=self.seed)
        tol = max(1e-6, 5 * self.results["cs"].grid.spacing ** 2)
        tri.write(self.path("triple"))
        self.report["center"] = {**tri.to_dict(), "bi_invariance": bi, "tolerance": tol}
        self.assert_("center.product_below_one", tri.mu_cs * tri.mu_cu < 1)
        self.assert_("center.bi_invariance", max(bi["forward"], bi["backward"]) <= tol, bi)

    def tangent(self):
        spec = self.system()
        K, rep = iterate_tangent(spec.cs_problem(), self.results["cs"], self.tcs)
        with open(self.path("tangent.csv"), "w", newline="") as fh:
            fh.write(K.to_csv())
        self.report["tangent"] = rep
        self.assert_("tangent.fd_consistency", rep["fd_error"] <= rep["fd_tolerance"],
                     {"error": rep["fd_error"], "tolerance": rep["fd_tolerance"]})

    def fibers(self):
        spec = self.system()
        if spec.name != "whiskered_torus":
            raise ConfigError("/products: fibers are only available for whiskered_torus")
        fc = self.cfg.get("fibers", {})
        lam = spec.info["lambda_s_block"]
        steps = fc.get("steps", 20)
        out = []
        for th in fc.get("theta", [0.0]):
            fb = strong_stable_fiber(spec, [th], fc.get("radius", 0.1), fc.get("nodes", 21))
            dn = fb.deviation_norms(spec.params["omega"])[: steps + 1]
            nz = dn[0] > 1e-8 * dn[0].max()  # skip the base point itself
            k = np.arange(1, steps + 1)[:, None]
            rate = float(np.max((dn[1:, nz] / dn[0, nz]) ** (1.0 / k)))
            out.append({"theta": th, "lipschitz": fb.lipschitz, "orbit_rate": rate,
                        "sup": float(np.abs(fb.values).max())})
            self.assert_(f"fibers.contraction[{th}]", max(fb.lipschitz, rate) <= lam + 0.05,
                         {"lipschitz": fb.lipschitz, "rate": rate, "bound": lam + 0.05})
        self.report["fibers"] = out

    def orbits(self):
        spec = self.system()
        problem = spec.cs_problem()
        h = self.results["cs"]
        oc = self.cfg.get("orbits", {})
        lam = self.report["cs"]["lambda_hat_bound"]
        cfg = self.tcs
        db, dc = problem.base_dim, problem.center_dim
        summary = []
        for i in range(oc.get("count", 10)):
            b = int(self.rng.integers(0, spec.atlas.n_samples))
            fib = self.rng.uniform(-cfg.eps0, cfg.eps0, problem.fiber_dim) * 0.5
            x0 = np.concatenate([spec.atlas.params[b], fib])
            orb = generate_orbit(problem, h, x0, oc.get("steps", 20), cfg, method=oc.get("method", "graph"))
            with open(self.path(f"orbit_{i:03d}.csv"), "w", newline="") as fh:
                fh.write(orb.to_csv())
            rep = classify_orbit(orb, h, lam, cfg.rho, oc.get("tol", 1e-6))
            summary.append({"index": i, "passed": rep.passed, "max_membership": float(orb.residuals.max()),
                            "violations": rep.violated_pairs})
        self.report["orbits"] = summary
        self.assert_("orbits.on_manifold", all(s["passed"] for s in summary))

    def execute(self, products):
        self.report["products"] = products
        for p in products:
            log.info("product %s", p)
            getattr(self, p)()
        with open(self.path("report.json"), "w") as fh:
            json.dump(_jsonable(self.report), fh, indent=2, sort_keys=True)
        return self.passed


def _setup(args):
    cfg = load_config(args.config)
    out = args.out or cfg.get("output") or "out"
    os.makedirs(out, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    return cfg, out, seed


def cmd_compute(args):
    cfg, out, seed = _setup(args)
    products = resolve_products(cfg.get("products", ["cs"]))
    return Run(cfg, out, seed, args.threads, args.strict).execute(products)


def cmd_check_ab(args):
    cfg, out, seed = _setup(args)
    return Run(cfg, out, seed, args.threads, args.strict).execute(["conditions"])


def cmd_verify_orbit(args):
    cfg, out, seed = _setup(args)
    run = Run(cfg, out, seed, args.threads, args.strict)
    run.cs()
    with open(args.orbit) as fh:
        orb = OrbitSegment.from_csv(fh.read())
    rep = classify_orbit(orb, run.results["cs"], run.report["cs"]["lambda_hat_bound"], run.tcs.rho, args.tol)
    run.report["verify_orbit"] = {"file": os.path.basename(args.orbit), **rep.to_dict()}
    run.assert_("verify_orbit.on_manifold", rep.passed, rep.violated_pairs)
    run.report["products"] = ["cs", "verify_orbit"]
    with open(run.path("report.json"), "w") as fh:
        json.dump(_jsonable(run.report), fh, indent=2, sort_keys=True)
    for v in rep.violated_pairs:
        print(f"violation at index {v['index']}: residual {v['residual']:.3e} > bound {v['bound']:.3e}")
    return run.passed


def cmd_grassmann(args):
    seed = args.seed if args.seed is not None else 0
    res = identity_suite(args.pairs, args.dim, np.random.default_rng(seed))
    res["passed"] = bool(res["norm_identity"] <= 1e-5 and res["difference_excess"] <= 1e-8)
    print(json.dumps(res, indent=2, sort_keys=True))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "grassmann.json"), "w") as fh:
            json.dump(res, fh, indent=2, sort_keys=True)
    return res["passed"]


def build_parser():
    p = argparse.ArgumentParser(prog="invman", description="Invariant manifolds of correspondences.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--strict", action="store_true", help="stop at the first failed assertion")

    common(sub.add_parser("compute", help="run the requested products"))
    common(sub.add_parser("check-ab", help="conditions only"))
    vo = sub.add_parser("verify-orbit", help="classify an orbit CSV against the computed section")
    common(vo)
    vo.add_argument("--orbit", required=True)
    vo.add_argument("--tol", type=float, default=1e-6)
    gt = sub.add_parser("grassmann-test", help="projection identity suite")
    common(gt, config=False)
    gt.add_argument("--pairs", type=int, default=200)
    gt.add_argument("--dim", type=int, default=6)
    return p


COMMANDS = {"compute": cmd_compute, "check-ab": cmd_check_ab, "verify-orbit": cmd_verify_orbit,
            "grassmann-test": cmd_grassmann}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return 2
    try:
        ok = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AssertionError as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return 1
    except (HypothesisError, ArithmeticError) as exc:
        print(f"pipeline failure in {type(exc).__module__}: {exc}", file=sys.stderr)
        return 3
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
