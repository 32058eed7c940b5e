import numpy as np
import pytest

from grassnet.graph import Graph

TWO_TRIANGLES = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]

# filled by test_acceptance.py, printed after the run
ACCEPTANCE_LINES: list[str] = []


def two_triangles(d: int = 2, seed: int = 0) -> Graph:
    rng = np.random.default_rng(seed)
    return Graph(6, TWO_TRIANGLES, rng.normal(size=(6, d)), np.array([0, 0, 0, 1, 1, 1]), 2,
                 "two-triangles")


def random_graph(n: int, p: float, seed: int, d: int = 3, num_classes: int = 2) -> Graph:
    rng = np.random.default_rng(seed)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return Graph(n, edges, rng.normal(size=(n, d)), rng.integers(0, num_classes, n),
                 num_classes, f"er-{n}-{seed}")


def twelve_node_graph(d: int = 4) -> Graph:
    """Connected 12-node fixture: a ring plus chords, 3 classes."""
    rng = np.random.default_rng(12)
    edges = [(i, (i + 1) % 12) for i in range(12)] + [(0, 6), (2, 9), (4, 10), (1, 5)]
    return Graph(12, edges, rng.normal(size=(12, d)), np.arange(12) % 3, 3, "twelve")


@pytest.fixture
def toy():
    return two_triangles()


@pytest.fixture
def twelve():
    return twelve_node_graph()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
