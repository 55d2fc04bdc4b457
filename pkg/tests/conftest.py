import networkx as nx
import numpy as np
import pytest

from skelgait.graph import SkeletonLayout


def random_tree(rng: np.random.Generator, n: int, gravity: int | None = None) -> SkeletonLayout:
    """Uniformly attach each node to an earlier one, then shuffle labels."""
    perm = rng.permutation(n)
    edges = [(int(perm[k]), int(perm[rng.integers(0, k)])) for k in range(1, n)]
    g = int(rng.integers(0, n)) if gravity is None else gravity
    return SkeletonLayout(n, tuple(edges), g)


def brute_force_labels(layout: SkeletonLayout, strategy: str) -> np.ndarray:
    """Direct evaluation of the neighbour label rule with networkx distances."""
    graph = nx.Graph()
    graph.add_nodes_from(range(layout.num_joints))
    graph.add_edges_from(layout.edges)
    d = dict(nx.all_pairs_shortest_path_length(graph))
    r = {k: d[k][layout.gravity_joint] for k in range(layout.num_joints)}
    n = layout.num_joints
    labels = np.full((n, n), -1)
    for i in range(n):
        for j in range(n):
            if d[i][j] > 1:
                continue
            if strategy == "uniform":
                labels[i, j] = 0
            elif strategy == "distance":
                labels[i, j] = d[i][j]
            elif r[i] == r[j]:
                labels[i, j] = 0
            elif r[i] < r[j]:
                labels[i, j] = 1
            else:
                labels[i, j] = 2
    return labels


@pytest.fixture
def chain3():
    return SkeletonLayout(3, ((0, 1), (1, 2)), gravity_joint=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
