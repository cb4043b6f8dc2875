import math

import numpy as np
import pytest

from tscert.certificate import CertificateParams, LyapunovParams, assemble_R
from tscert.cli import RunConfig, certify
from tscert.network import kron_reduce, parse_case, solve_equilibrium
from tscert.lure import build_lure

ACCEPTANCE_LINES: dict[int, str] = {}


def random_case(rng: np.random.Generator, n_machines: int, n_interior: int = 0,
                extra_edge_prob: float = 0.3, max_injection: float = 0.3) -> dict:
    """Connected random case: machines 1..n, reference n+1, interior buses after that."""
    ids = list(range(1, n_machines + n_interior + 2))
    ref = n_machines + 1
    buses = []
    for i in ids:
        V = float(rng.uniform(0.95, 1.05))
        if i <= n_machines:
            buses.append({"id": i, "kind": "machine", "V": V, "P": float(rng.uniform(-max_injection, max_injection)),
                          "M": float(rng.uniform(0.05, 1.0)), "D": float(rng.uniform(0.5, 2.0))})
        elif i == ref:
            buses.append({"id": i, "kind": "infinite_bus", "V": V})
        else:
            buses.append({"id": i, "kind": "interior", "V": V})
    order = list(rng.permutation(ids))
    pairs = set()
    for k in range(1, len(order)):
        j = order[int(rng.integers(0, k))]
        pairs.add((min(order[k], j), max(order[k], j)))
    for a in ids:
        for b in ids:
            if a < b and (a, b) not in pairs and rng.random() < extra_edge_prob:
                pairs.add((a, b))
    lines = [{"from": int(a), "to": int(b), "B": float(rng.uniform(1.0, 5.0))} for a, b in sorted(pairs)]
    return {"buses": buses, "lines": lines}


def random_system(seed: int, max_machines: int = 5):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_machines + 1))
    net = kron_reduce(parse_case(random_case(rng, n, n_interior=int(rng.integers(0, 3)))))
    eq = solve_equilibrium(net)
    return net, eq, build_lure(net, eq), rng


def make_certificate(system, sector, P, lam, gamma=None) -> CertificateParams:
    """Hand-built parameters wrapped as a certificate (not necessarily a valid one)."""
    params = LyapunovParams(np.asarray(P, dtype=float), np.asarray(lam, dtype=float))
    gamma = np.ones(system.edge_count) if gamma is None else np.asarray(gamma, dtype=float)
    asm = assemble_R(params, system, sector, gamma)
    return CertificateParams(params, asm, sector, -asm.max_eig_R)


@pytest.fixture(scope="session")
def smib_run():
    return certify(RunConfig("smib", (3 * math.pi / 4,), (math.pi,)))


@pytest.fixture(scope="session")
def ieee9_run():
    return certify(RunConfig("ieee9_kron", (math.pi / 6,), (math.pi,)))


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
