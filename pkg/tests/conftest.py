import numpy as np
import pytest

from sgbgh.graph import BipartiteGraph, split_dataset
from sgbgh.synthetic import planted_blocks


def random_graph(nu, nv, p, seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((nu, nv)) < p
    # every source gets at least one edge
    for u in range(nu):
        if not mask[u].any():
            mask[u, rng.integers(nv)] = True
    u, v = np.nonzero(mask)
    return BipartiteGraph(nu, nv, np.stack([u, v], axis=1))


def dense_normalized(nu, nv, edges):
    n = nu + nv
    a = np.zeros((n, n))
    for u, v in edges:
        a[u, nu + v] = a[nu + v, u] = 1.0
    deg = a.sum(axis=1)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1)), 0.0)
    return inv[:, None] * a * inv[None, :]


@pytest.fixture
def small_graph():
    return random_graph(6, 9, 0.35, seed=3)


@pytest.fixture
def planted_split():
    g = planted_blocks(40, 60, 8, 0.6, 0.02, seed=0)
    return split_dataset(g, 0.8, seed=0)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance check; echoed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(label, ok, detail):
        line = f"{label}: {'PASS' if ok else 'FAIL'} {detail}"
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
