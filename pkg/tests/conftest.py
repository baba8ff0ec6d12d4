import numpy as np
import pytest

from propinf.graph import AttributedGraph, edge_key


def make_graph(n, edges, attr=None, label=None, features=None, n_classes=None):
    """Small-graph builder for tests."""
    attr = np.zeros(n, dtype=int) if attr is None else np.asarray(attr)
    label = np.zeros(n, dtype=int) if label is None else np.asarray(label)
    if features is None:
        rng = np.random.default_rng(0)
        features = rng.normal(size=(n, 3))
    if n_classes is None:
        n_classes = int(label.max()) + 1 if n > 0 else 1
    return AttributedGraph(
        node_count=n,
        edges=frozenset(edge_key(u, v) for (u, v) in edges),
        features=np.asarray(features, dtype=float),
        property_attr=attr,
        class_label=label,
        n_classes=n_classes,
    )


def two_cliques_bridge(s):
    """Two s-cliques joined by the single edge (0, s)."""
    edges = []
    for a in range(s):
        for b in range(a + 1, s):
            edges.append((a, b))
            edges.append((s + a, s + b))
    edges.append((0, s))
    return make_graph(2 * s, edges)


def random_er_graph(rng, n, p, n_classes=2, f=3):
    edges = []
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < p:
                edges.append((u, v))
    attr = rng.integers(0, 2, size=n)
    label = rng.integers(0, n_classes, size=n)
    feats = rng.normal(size=(n, f))
    return make_graph(n, edges, attr=attr, label=label, features=feats, n_classes=n_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
