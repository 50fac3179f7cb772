"""Exact nearest-neighbour search over 3D point clouds.

The tree is built with numpy; queries run in the compiled ``_kdtree_ext``
kernel when it is importable and otherwise in ``_kdtree_py``. Setting the
environment variable ``RESFLOW_PURE_PYTHON=1`` forces the fallback.

Ties between equidistant reference points resolve to the smallest original
index, so results are identical to an exhaustive scan.
"""

from __future__ import annotations

import os
from typing import NamedTuple

import numpy as np

from . import _kdtree_py
from .errors import EmptyCloud

try:
    if os.environ.get("RESFLOW_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-Python backend forced by RESFLOW_PURE_PYTHON")
    from . import _kdtree_ext
except ImportError:  # pragma: no cover - depends on the build
    _kdtree_ext = None

BACKENDS = {"python": _kdtree_py.query}
if _kdtree_ext is not None:
    BACKENDS["compiled"] = _kdtree_ext.query
DEFAULT_BACKEND = "compiled" if _kdtree_ext is not None else "python"

LEAF_SIZE = 16


class Neighbor(NamedTuple):
    point: np.ndarray
    index: int
    distance: float


class NeighborIndex:
    """Immutable KD-tree over a snapshot of a point cloud."""

    def __init__(self, points, leaf_size: int = LEAF_SIZE, backend: str | None = None):
        P = np.array(points, dtype=np.float64, order="C")
        if P.ndim != 2 or P.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {P.shape}")
        if P.shape[0] == 0:
            raise EmptyCloud("cannot index an empty cloud")
        if not np.all(np.isfinite(P)):
            raise ValueError("points must be finite")
        backend = backend or DEFAULT_BACKEND
        if backend not in BACKENDS:
            raise ValueError(f"unknown or unavailable backend {backend!r}; have {sorted(BACKENDS)}")
        self.backend = backend
        self._query = BACKENDS[backend]
        P.setflags(write=False)
        self.points = P
        self._build(max(1, int(leaf_size)))

    def __len__(self):
        return self.points.shape[0]

    def _build(self, leaf_size):
        P = self.points
        n = P.shape[0]
        perm = np.arange(n, dtype=np.int64)
        lo, hi, left, right, dim, split = [], [], [], [], [], []

        def new_node(a, b):
            lo.append(a)
            hi.append(b)
            left.append(-1)
            right.append(-1)
            dim.append(0)
            split.append(0.0)
            return len(lo) - 1

        pending = [(new_node(0, n), 0)]
        max_depth = 0
        while pending:
            node, depth = pending.pop()
            max_depth = max(max_depth, depth)
            a, b = lo[node], hi[node]
            if b - a <= leaf_size:
                continue
            sub = P[perm[a:b]]
            spread = sub.max(axis=0) - sub.min(axis=0)
            d = int(np.argmax(spread))
            if spread[d] == 0.0:
                continue  # all points identical: keep as one leaf
            mid = (b - a) // 2
            order = np.argpartition(sub[:, d], mid, kind="introselect")
            perm[a:b] = perm[a:b][order]
            dim[node] = d
            split[node] = float(P[perm[a + mid], d])
            left[node] = new_node(a, a + mid)
            right[node] = new_node(a + mid, b)
            pending.append((left[node], depth + 1))
            pending.append((right[node], depth + 1))
        if max_depth > 200:  # compiled kernel uses a fixed traversal stack
            raise RuntimeError(f"kd-tree too deep ({max_depth})")
        self._perm = perm
        self._sorted = np.ascontiguousarray(P[perm])
        self._lo = np.asarray(lo, dtype=np.int64)
        self._hi = np.asarray(hi, dtype=np.int64)
        self._left = np.asarray(left, dtype=np.int64)
        self._right = np.asarray(right, dtype=np.int64)
        self._dim = np.asarray(dim, dtype=np.int64)
        self._split = np.asarray(split, dtype=np.float64)
        self.depth = max_depth

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Batch query. Returns ``(indices, distances)`` for an ``(M, 3)`` array."""
        Q = np.ascontiguousarray(queries, dtype=np.float64)
        if Q.ndim == 1:
            Q = Q.reshape(1, 3)
        if Q.ndim != 2 or Q.shape[1] != 3:
            raise ValueError(f"queries must have shape (M, 3), got {Q.shape}")
        if not np.all(np.isfinite(Q)):
            raise ValueError("queries must be finite")
        idx, d2 = self._query(
            self._sorted, self._perm, self._lo, self._hi, self._left, self._right,
            self._dim, self._split, Q,
        )
        return idx, np.sqrt(d2)

    def nearest(self, q) -> Neighbor:
        idx, dist = self.query(np.asarray(q, dtype=np.float64).reshape(1, 3))
        i = int(idx[0])
        return Neighbor(self.points[i].copy(), i, float(dist[0]))


def build(points, backend: str | None = None) -> NeighborIndex:
    return NeighborIndex(points, backend=backend)


def nearest(index: NeighborIndex, q) -> Neighbor:
    return index.nearest(q)


def brute_force(reference, queries) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive scan; reference implementation for small inputs and tests."""
    R = np.asarray(reference, dtype=np.float64)
    Q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    idx = np.empty(Q.shape[0], dtype=np.int64)
    dist = np.empty(Q.shape[0])
    for i, q in enumerate(Q):
        d2 = ((R - q) ** 2).sum(axis=1)
        k = int(np.argmin(d2))  # argmin returns the first (smallest) index among ties
        idx[i] = k
        dist[i] = np.sqrt(d2[k])
    return idx, dist
