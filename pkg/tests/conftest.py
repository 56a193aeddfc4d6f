import numpy as np
import pytest

from graphonflux.model import GraphInstance

ACCEPTANCE_RESULTS = []


def random_connected_graph(rng, n, density=0.5, length_range=(0.1, 1.0)):
    """Erdos-Renyi graph with a random spanning path so it is always connected."""
    A = (rng.random((n, n)) < density).astype(float)
    A = np.triu(A, 1)
    perm = rng.permutation(n)
    A[perm[:-1], perm[1:]] = 1.0
    A = np.triu(np.maximum(A, A.T), 1)
    A = A + A.T
    L = rng.uniform(*length_range, size=(n, n))
    L = np.triu(L, 1)
    L = L + L.T
    return GraphInstance(A, np.where(A == 1, L, 0.0))


def random_conductivities(rng, graph, r, spread=2.0):
    B = rng.uniform(r, r + spread, size=(graph.n, graph.n))
    B = np.triu(B, 1)
    B = B + B.T
    return np.where(graph.adjacency == 1, B, 0.0)


def random_sources(rng, n):
    S = rng.standard_normal(n)
    return S - S.mean()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{cid:>4} {'PASS' if ok else 'FAIL'}  {detail}")
