import numpy as np
import pytest

from jointsparse.model import CohortDataset, compute_moments


def random_cohorts(rng, p, q, sizes=None, noise=1.0):
    sizes = sizes or [int(rng.integers(30, 60)) for _ in range(q)]
    theta = rng.normal(size=(p, q))
    cohorts = []
    for j, n in enumerate(sizes):
        X = rng.normal(size=(n, p))
        cohorts.append((X, X @ theta[:, j] + noise * rng.normal(size=n)))
    return CohortDataset(cohorts)


def fd_gradient(f, theta, h=1e-6):
    """Central finite differences of a scalar function of a matrix."""
    g = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        tp, tm = theta.copy(), theta.copy()
        tp[idx] += h
        tm[idx] -= h
        g[idx] = (f(tp) - f(tm)) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def small_problem(rng):
    data = random_cohorts(rng, 5, 3)
    return data, compute_moments(data)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
