import sys
from pathlib import Path

import numpy as np
import pytest

from graph_core import GraphInstance
from graph_datasets import GraphSetConfig, SbmConfig, generate_graph_set, generate_sbm
from search_space import DEFAULT_TABLE, sample_uniform
from surrogate import TrainingArchive

SRC = Path(__file__).resolve().parents[1] / "src"
CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def make_graph(n, edges, d0=3, seed=0, labels=None, masks=None):
    rng = np.random.default_rng(seed)
    return GraphInstance(
        n=n,
        edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2),
        features=rng.normal(size=(n, d0)),
        node_labels=labels,
        split_masks=masks,
    )


def random_connected_graph(n, p=0.3, seed=0, d0=3):
    """Path backbone plus G(n, p) edges, so the graph is connected."""
    rng = np.random.default_rng(seed)
    edges = {(i, i + 1) for i in range(n - 1)}
    for i in range(n):
        for j in range(i + 2, n):
            if rng.random() < p:
                edges.add((i, j))
    return make_graph(n, sorted(edges), d0=d0, seed=seed)


@pytest.fixture
def k2():
    return make_graph(2, [(0, 1)])


@pytest.fixture
def k3():
    return make_graph(3, [(0, 1), (1, 2), (0, 2)])


@pytest.fixture
def star4():
    return make_graph(4, [(0, 1), (0, 2), (0, 3)])


@pytest.fixture
def path3():
    return make_graph(3, [(0, 1), (1, 2)])


@pytest.fixture
def two_edges():
    return make_graph(4, [(0, 1), (2, 3)])


@pytest.fixture
def six_node_graph():
    """Hexagon with one chord; labels alternate over 3 classes, every node in train."""
    labels = np.array([0, 1, 2, 0, 1, 2])
    masks = {"train": np.ones(6, bool), "val": np.zeros(6, bool), "test": np.zeros(6, bool)}
    return make_graph(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 3)],
                      d0=3, seed=1, labels=labels, masks=masks)


@pytest.fixture
def twelve_node_graph():
    return random_connected_graph(12, p=0.25, seed=3)


@pytest.fixture
def tiny_sbm():
    return generate_sbm(SbmConfig(communities=3, nodes_per_community=8, p_in=0.5, p_out=0.02,
                                  feature_dim=4, feature_noise=0.3, seed=0))


@pytest.fixture
def sbm():
    return generate_sbm(SbmConfig(seed=0))


@pytest.fixture
def tiny_graph_set():
    return generate_graph_set(GraphSetConfig(num_graphs=20, nodes_min=6, nodes_max=9,
                                             edge_prob=0.35, seed=0))


def synthetic_archive(size, value_fn, seed=0, minimize=False, metric_name="acc"):
    rng = np.random.default_rng(seed)
    seen, encodings = set(), []
    while len(encodings) < size:
        enc = sample_uniform(DEFAULT_TABLE, rng)
        if enc not in seen:
            seen.add(enc)
            encodings.append(enc)
    values = np.asarray([value_fn(enc) for enc in encodings], dtype=float)
    return TrainingArchive(encodings, values, minimize, metric_name)


@pytest.fixture
def worker_command():
    def _command(*flags):
        return [sys.executable, str(SRC / "evaluator_worker.py"), *flags]
    return _command
