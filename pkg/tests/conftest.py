"""Shared fixtures and small graph factories."""

import numpy as np
import pytest

from heatgraph.graphs import LayeredGraph


def make_graph(positions, layer, classes, edges, sid=None):
    positions = np.asarray(positions, dtype=float)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    lengths = np.linalg.norm(positions[edges[:, 0]] - positions[edges[:, 1]], axis=1)
    if sid is None:
        sid = np.ones(len(positions))
    return LayeredGraph(
        positions=positions,
        layer=np.asarray(layer, dtype=np.int64),
        classes=np.asarray(classes, dtype=np.int8),
        sid=np.asarray(sid, dtype=float),
        edge_index=edges,
        edge_length=lengths,
    )


def two_node_graph():
    """Two vertices 1 mm apart, one edge; vertex 1 is the top layer."""
    return make_graph(
        positions=[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
        layer=[0, 1],
        classes=[0, 1],
        edges=[[0, 1]],
    )


def random_connected_graph(n, rng, n_layers=3):
    """Chain plus random chords; classes follow the layer assignment."""
    pos = rng.uniform(0.0, 3.0, size=(n, 3))
    layer = np.sort(rng.integers(0, n_layers, size=n))
    edges = [(i, i + 1) for i in range(n - 1)]
    for _ in range(n):
        i, j = rng.integers(0, n, 2)
        if i != j:
            edges.append((min(i, j), max(i, j)))
    edges = np.unique(np.array(edges, dtype=np.int64), axis=0)
    classes = np.full(n, 3, dtype=np.int8)
    classes[layer == layer.max()] = 1
    classes[layer == layer.min()] = 0
    return make_graph(pos, layer, classes, edges, sid=rng.uniform(0.5, 2.0, n))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
