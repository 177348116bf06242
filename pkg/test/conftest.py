import numpy as np
import pytest

from bstc.data import AdjacencyGraph, PanelData
from bstc.simulate import grid_graph


def write_panel(path, rows, header="unit,time,y,x1"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    return str(path)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def path_graph():
    # 0 - 1 - 2 - 3
    return AdjacencyGraph(4, frozenset({(0, 1), (1, 2), (2, 3)}), unit_ids=["a", "b", "c", "d"])


@pytest.fixture
def small_panel(rng):
    I, T, p = 4, 3, 1
    x = np.ones((I, T, p + 1))
    x[:, :, 1] = rng.normal(size=(I, T))
    y = rng.normal(size=(I, T))
    return PanelData(["a", "b", "c", "d"], [1, 2, 3], y, x)


@pytest.fixture
def grid3():
    return grid_graph(3, 3)
