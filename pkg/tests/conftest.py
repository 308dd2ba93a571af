from pathlib import Path

import numpy as np
import pytest

from decamel.dataset import load_dataset

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def f1():
    return load_dataset(FIXTURES / "f1.csv")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_difference(fn, x, h=1e-5):
    """Numerical gradient of scalar ``fn`` at array ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = fn()
        x[i] = old - h
        down = fn()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
