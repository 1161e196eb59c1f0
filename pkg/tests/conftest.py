import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from qotbilevel.grid import Field, build_grid, product_grid  # noqa: E402
from qotbilevel.qot import QotProblem  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_instance(rng, n1, n2, gamma=None, floor=0.05):
    """Random box instance with marginal densities >= ``floor`` and equal masses."""
    g1 = build_grid(0.0, rng.uniform(0.5, 2.0), n1)
    g2 = build_grid(rng.uniform(-0.5, 0.5), rng.uniform(1.0, 2.5), n2)
    g = product_grid(g1, g2)
    m1 = floor + rng.uniform(0, 2, n1)
    m2 = floor + rng.uniform(0, 2, n2)
    # raise the lighter marginal by a constant so both stay above the floor
    d = m1.sum() * g1.h - m2.sum() * g2.h
    if d > 0:
        m2 += d / g2.length
    else:
        m1 -= d / g1.length
    x1, x2 = g.mesh()
    c = np.abs(x1 - x2) ** rng.uniform(1, 3) + 0.3 * rng.uniform(0, 1, g.shape)
    gamma = gamma if gamma is not None else float(10 ** rng.uniform(-2, 1))
    return QotProblem(Field(g, c), Field(g1, m1), Field(g2, m2), gamma)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def unit_square_16():
    g1 = build_grid(0, 1, 16)
    return product_grid(g1, g1)
