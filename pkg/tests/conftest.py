import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dog.graph import AttributedGraph, canonical_edges

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_graph(rng, n, p, n_features=4, n_classes=3):
    upper = np.triu(rng.random((n, n)) < p, k=1)
    labels = rng.integers(0, n_classes, n)
    split = np.where(rng.random(n) < 0.5, "train", "test")
    return AttributedGraph(rng.normal(size=(n, n_features)), canonical_edges(np.argwhere(upper), n), labels, split)


def path_graph(n=3, n_features=2):
    edges = np.array([[i, i + 1] for i in range(n - 1)])
    return AttributedGraph(np.eye(n, n_features), edges, np.zeros(n, dtype=int), ["train"] * n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
