import numpy as np
import pytest

from diseasemap.fixtures import small_area, study_area
from diseasemap.graph import AdjacencyGraph


def path_graph(n=3):
    ids = [chr(ord("a") + k) for k in range(n)]
    return AdjacencyGraph.from_edges(ids, [(ids[k], ids[k + 1]) for k in range(n - 1)])


def star_graph(n=4):
    ids = [chr(ord("a") + k) for k in range(n)]
    return AdjacencyGraph.from_edges(ids, [(ids[0], ids[k]) for k in range(1, n)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def catalonia():
    """42-region synthetic territory used as the full-size fixture."""
    return study_area()


@pytest.fixture(scope="session")
def small():
    return small_area()


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[number])
