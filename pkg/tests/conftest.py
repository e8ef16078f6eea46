import numpy as np
import pytest

from nie.graph import Graph


@pytest.fixture
def triangle():
    return Graph.from_edges(
        3, np.array([[0, 1], [1, 2], [2, 0]]), np.eye(3), np.array([0, 1, 0]), 2
    )


@pytest.fixture
def path3():
    return Graph.from_edges(3, np.array([[0, 1], [1, 2]]), np.eye(3), np.array([0, 1, 0]), 2)


@pytest.fixture
def star4():
    # node 0 is the center
    return Graph.from_edges(
        4, np.array([[0, 1], [0, 2], [0, 3]]), np.eye(4), np.array([0, 1, 1, 0]), 2
    )


@pytest.fixture
def two_node():
    return Graph.from_edges(2, np.array([[0, 1]]), np.array([[1.0], [2.0]]))
