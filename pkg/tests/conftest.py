import sys

import numpy as np
import pytest

from invman.graph_transform import TransformConfig, iterate
from invman.systems import linear_block_system, poly_perturbed_system, whiskered_torus_system
from invman.trichotomy import compute_cs, compute_cu_via_dual, intersect_center

QUADRATIC = dict(linear=[0.5, 2.0], terms=[(1, 1.0, (2, 0))], dims=(0, 1, 1), radius=0.3)


@pytest.fixture(scope="session")
def quadratic():
    spec = poly_perturbed_system(**QUADRATIC)
    cfg = TransformConfig(sigma=0.15, rho=0.1, eps=0.15, nodes=101, mode="strictly_inflowing")
    h, rep = iterate(spec.cs_problem(), cfg)
    return spec, cfg, h, rep


@pytest.fixture(scope="session")
def coupled():
    spec = linear_block_system({"c": [1.05], "s": [0.5], "u": [2.5]}, coupling=0.02)
    cs_cfg = TransformConfig(nodes=21, mode="general")
    cu_cfg = TransformConfig(nodes=21, mode="strictly_inflowing")
    h_cs, r_cs = compute_cs(spec, cs_cfg)
    h_cu, r_cu = compute_cu_via_dual(spec, cu_cfg)
    triple = intersect_center(h_cs, h_cu)
    return {"spec": spec, "cs_cfg": cs_cfg, "cu_cfg": cu_cfg, "h_cs": h_cs, "h_cu": h_cu,
            "r_cs": r_cs, "r_cu": r_cu, "triple": triple}


@pytest.fixture(scope="session")
def torus():
    spec = whiskered_torus_system(eps=0.01)
    cfg = TransformConfig(sigma=0.1, eps=0.1, rho=0.1, nodes=11, mode="invariant")
    h, rep = iterate(spec.cs_problem(), cfg)
    return spec, cfg, h, rep


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
