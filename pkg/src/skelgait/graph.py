"""Joint layouts and partitioned adjacency for the spatio-temporal gait graph."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

PARTITION_STRATEGIES = ("uniform", "distance", "spatial")
_NUM_LABELS = {"uniform": 1, "distance": 2, "spatial": 3}


class LayoutError(ValueError):
    pass


# OpenPose COCO output order.
COCO18_JOINTS = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)
COCO18_EDGES = (
    (0, 1),
    (1, 2), (1, 5), (1, 8), (1, 11),
    (2, 3), (3, 4),
    (5, 6), (6, 7),
    (8, 9), (9, 10),
    (11, 12), (12, 13),
    (0, 14), (0, 15),
    (14, 16), (15, 17),
)


@dataclass(frozen=True)
class SkeletonLayout:
    num_joints: int
    edges: tuple[tuple[int, int], ...]
    gravity_joint: int
    name: str = "custom"
    joint_names: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        n = self.num_joints
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise LayoutError(f"num_joints must be a positive integer, got {n!r}")
        seen = set()
        for edge in self.edges:
            if len(edge) != 2:
                raise LayoutError(f"edge {edge!r} is not a pair")
            i, j = int(edge[0]), int(edge[1])
            if not (0 <= i < n and 0 <= j < n):
                raise LayoutError(f"edge {edge!r} has an index outside [0, {n})")
            if i == j:
                raise LayoutError(f"self-loop edge {edge!r}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise LayoutError(f"duplicate edge {edge!r}")
            seen.add(key)
        if not 0 <= self.gravity_joint < n:
            raise LayoutError(f"gravity_joint {self.gravity_joint} outside [0, {n})")
        if self.joint_names and len(self.joint_names) != n:
            raise LayoutError("joint_names length does not match num_joints")
        hops = _bfs(n, self.edges, 0)
        if np.any(hops < 0):
            missing = np.flatnonzero(hops < 0).tolist()
            raise LayoutError(f"edge set is disconnected; unreachable joints {missing}")

    def adjacency(self) -> np.ndarray:
        """Symmetric 0/1 adjacency without self-loops."""
        a = np.zeros((self.num_joints, self.num_joints))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def hop_distances(self) -> np.ndarray:
        """All-pairs shortest path lengths, shape (N, N)."""
        return np.stack([_bfs(self.num_joints, self.edges, s) for s in range(self.num_joints)])

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_joints": int(self.num_joints),
            "edges": [list(e) for e in self.edges],
            "gravity_joint": int(self.gravity_joint),
        }


def _bfs(n: int, edges: Sequence[tuple[int, int]], source: int) -> np.ndarray:
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for i, j in edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    dist = np.full(n, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in nbrs[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


BUILTIN_LAYOUTS = {
    "coco18": lambda: SkeletonLayout(
        18, COCO18_EDGES, gravity_joint=1, name="coco18", joint_names=COCO18_JOINTS
    ),
}


def build_layout(spec: str | Mapping | SkeletonLayout) -> SkeletonLayout:
    """Resolve a built-in layout name or an explicit description.

    Explicit descriptions are mappings with ``num_joints`` (or ``N``),
    ``edges`` and ``gravity_joint`` (or ``gravity``).
    """
    if isinstance(spec, SkeletonLayout):
        return spec
    if isinstance(spec, str):
        try:
            return BUILTIN_LAYOUTS[spec.lower()]()
        except KeyError:
            raise LayoutError(
                f"unknown layout {spec!r}; built-ins: {sorted(BUILTIN_LAYOUTS)}"
            ) from None
    if isinstance(spec, Mapping):
        n = spec.get("num_joints", spec.get("N"))
        if n is None:
            raise LayoutError("explicit layout needs num_joints")
        edges = spec.get("edges", ())
        gravity = spec.get("gravity_joint", spec.get("gravity", 0))
        try:
            edges = tuple((int(a), int(b)) for a, b in edges)
        except (TypeError, ValueError) as exc:
            raise LayoutError(f"malformed edge list: {exc}") from None
        return SkeletonLayout(
            int(n), edges, int(gravity), name=str(spec.get("name", "custom"))
        )
    raise LayoutError(f"cannot build a layout from {type(spec).__name__}")


def graph_distance(layout: SkeletonLayout, i: int, j: int) -> int:
    n = layout.num_joints
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"joint index out of range for {n} joints")
    return int(_bfs(n, layout.edges, i)[j])


@dataclass(frozen=True, eq=False)
class PartitionedAdjacency:
    strategy: str
    matrices: np.ndarray  # (S, N, N); row = anchor, column = neighbor
    normalized: bool = False

    def __post_init__(self):
        if self.strategy not in _NUM_LABELS:
            raise ValueError(f"unknown partition strategy {self.strategy!r}")
        m = np.array(self.matrices, dtype=np.float64)
        if m.ndim != 3 or m.shape[1] != m.shape[2]:
            raise ValueError(f"partition matrices must be (S, N, N), got {m.shape}")
        if m.shape[0] != _NUM_LABELS[self.strategy]:
            raise ValueError(
                f"{self.strategy} expects {_NUM_LABELS[self.strategy]} labels, got {m.shape[0]}"
            )
        m.setflags(write=False)
        object.__setattr__(self, "matrices", m)

    @property
    def num_labels(self) -> int:
        return self.matrices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.matrices.shape[1]


def num_labels(strategy: str) -> int:
    try:
        return _NUM_LABELS[strategy]
    except KeyError:
        raise ValueError(
            f"unknown partition strategy {strategy!r}; expected one of {PARTITION_STRATEGIES}"
        ) from None


def spatial_labels(layout: SkeletonLayout, strategy: str) -> np.ndarray:
    """Label of every (anchor, neighbor) pair with hop distance <= 1, else -1."""
    num_labels(strategy)
    n = layout.num_joints
    hops = layout.hop_distances()
    labels = np.full((n, n), -1, dtype=np.int64)
    near = hops <= 1
    if strategy == "uniform":
        labels[near] = 0
    elif strategy == "distance":
        labels[near] = np.where(hops[near] == 0, 0, 1)
    else:
        r = hops[layout.gravity_joint]
        ri = np.broadcast_to(r[:, None], (n, n))
        rj = np.broadcast_to(r[None, :], (n, n))
        lab = np.where(ri == rj, 0, np.where(ri < rj, 1, 2))
        labels[near] = lab[near]
    return labels


def partition_adjacency(layout: SkeletonLayout, strategy: str = "spatial") -> PartitionedAdjacency:
    """Unnormalized 0/1 matrices, one per neighbor label."""
    s = num_labels(strategy)
    labels = spatial_labels(layout, strategy)
    mats = np.stack([(labels == k).astype(np.float64) for k in range(s)])
    return PartitionedAdjacency(strategy, mats, normalized=False)


def normalize_partitions(pa: PartitionedAdjacency) -> PartitionedAdjacency:
    # dividing the support by the member count equals the row-sum rule on 0/1
    # input and keeps re-normalization exact
    support = (np.asarray(pa.matrices) != 0).astype(np.float64)
    count = support.sum(axis=2, keepdims=True)
    out = np.divide(support, count, out=np.zeros_like(support), where=count > 0)
    return PartitionedAdjacency(pa.strategy, out, normalized=True)


def normalized_adjacency(layout: SkeletonLayout, strategy: str = "spatial") -> PartitionedAdjacency:
    return normalize_partitions(partition_adjacency(layout, strategy))
