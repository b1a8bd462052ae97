"""Vectorized deduplication of point batches by metric proximity.

Used for group-element matrices (flattened) and leaf dual vectors.  The
discreteness of the objects involved guarantees a separation gap orders
of magnitude above the tolerance, so proximity clustering is exact here.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


class DisjointSet:
    """Union-find with path compression; indices 0..n-1."""

    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def dedup_indices(rows: np.ndarray, tol: float) -> np.ndarray:
    """Indices of one representative per tol-cluster, keeping first occurrences.

    Representative = smallest index in each cluster, so the output order is
    deterministic given the input order.
    """
    n = len(rows)
    if n == 0:
        return np.empty(0, dtype=int)
    dsu = DisjointSet(n)
    for i, j in cKDTree(rows).query_pairs(tol):
        dsu.union(i, j)
    roots = np.fromiter((dsu.find(i) for i in range(n)), dtype=int, count=n)
    return np.flatnonzero(roots == np.arange(n))


def mask_not_near(rows: np.ndarray, existing: np.ndarray, tol: float) -> np.ndarray:
    """Boolean mask of rows farther than tol from every row of `existing`."""
    if len(existing) == 0 or len(rows) == 0:
        return np.ones(len(rows), dtype=bool)
    d, _ = cKDTree(existing).query(rows, k=1, distance_upper_bound=tol)
    return np.isinf(d)
