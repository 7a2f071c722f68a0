from __future__ import annotations

import numpy as np
import pytest

from motbounds.cost import CostSpec
from motbounds.measures import DiscreteMarginal, MarginalSystem

# acceptance outcomes collected by tests/test_acceptance.py, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def random_system(rng, K, sizes=None, d=1, uniform=True) -> MarginalSystem:
    sizes = sizes if sizes is not None else rng.integers(2, 5, K)
    margs = []
    for n in sizes:
        pts = rng.uniform(-1.0, 1.0, (int(n), d))
        w = np.full(int(n), 1.0 / n) if uniform else rng.dirichlet(np.ones(int(n)))
        margs.append(DiscreteMarginal(pts, w))
    return MarginalSystem(tuple(margs))


def random_spec(rng, K, d, kind) -> CostSpec:
    if kind == "mw2":
        return CostSpec.mw2()
    if kind == "contrast":
        return CostSpec.contrast(rng.normal(size=K))
    B = rng.normal(size=(K * d, K * d))
    return CostSpec.quadratic((B + B.T) / 2)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
