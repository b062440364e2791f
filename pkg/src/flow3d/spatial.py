"""Exact neighborhood and sampling primitives: radius search, kNN, FPS.

Radius queries are accelerated with a uniform voxel grid (cell edge = r,
rebuilt per call); kNN and FPS are vectorized exact scans. All tie-breaks
are by ascending index so every operation is a pure, bit-reproducible
function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .core import (InvalidRadius, KTooLarge, MTooLarge, PointCloud, rng_from)


@dataclass
class NeighborList:
    """Ragged per-query neighbor indices stored flat.

    indices[offsets[j]:offsets[j+1]] are the source indices for query j,
    sorted ascending.
    """

    indices: np.ndarray  # (R,) int64
    offsets: np.ndarray  # (M+1,) int64

    def __len__(self) -> int:
        return self.offsets.shape[0] - 1

    def group(self, j: int) -> np.ndarray:
        return self.indices[self.offsets[j]:self.offsets[j + 1]]

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    @staticmethod
    def from_lists(lists: List[np.ndarray]) -> "NeighborList":
        counts = np.array([len(g) for g in lists], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        if lists:
            indices = np.concatenate([np.asarray(g, dtype=np.int64) for g in lists]) \
                if offsets[-1] > 0 else np.empty(0, dtype=np.int64)
        else:
            indices = np.empty(0, dtype=np.int64)
        return NeighborList(indices, offsets)


def _grid_cells(points: np.ndarray, cell: float):
    return np.floor(points / cell).astype(np.int64)


def radius_neighbors(source: PointCloud, queries: np.ndarray, r: float,
                     cap: Optional[int] = None, seed: int = 0) -> NeighborList:
    """Exact r-ball membership per query, optionally capped.

    When a query has more than `cap` true neighbors, a uniformly random
    cap-subset is drawn from `seed` (one stream for the whole call). Capped
    or not, each group is returned sorted by ascending source index.
    """
    if r < 0:
        raise InvalidRadius(f"radius must be >= 0, got {r}")
    if cap is not None and cap < 1:
        raise InvalidRadius(f"cap must be >= 1, got {cap}")
    src = source.positions
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    n, m = src.shape[0], queries.shape[0]

    groups: List[np.ndarray] = []
    if r == 0.0 or n * m <= 4096:
        # Brute force is cheapest at small scale; exact either way.
        for j in range(m):
            d2 = np.einsum("ij,ij->i", src - queries[j], src - queries[j])
            groups.append(np.flatnonzero(d2 <= r * r))
    else:
        cell = r
        src_cells = _grid_cells(src, cell)
        order = np.lexsort((np.arange(n), src_cells[:, 2], src_cells[:, 1],
                            src_cells[:, 0]))
        sorted_cells = src_cells[order]
        # cell id -> slice of `order`
        change = np.any(np.diff(sorted_cells, axis=0) != 0, axis=1)
        starts = np.concatenate([[0], np.flatnonzero(change) + 1, [n]])
        table = {}
        for s, e in zip(starts[:-1], starts[1:]):
            table[tuple(sorted_cells[s])] = order[s:e]
        q_cells = _grid_cells(queries, cell)
        r2 = r * r
        for j in range(m):
            cx, cy, cz = q_cells[j]
            cands = []
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        bucket = table.get((cx + dx, cy + dy, cz + dz))
                        if bucket is not None:
                            cands.append(bucket)
            if not cands:
                groups.append(np.empty(0, dtype=np.int64))
                continue
            cand = np.concatenate(cands)
            diff = src[cand] - queries[j]
            keep = cand[np.einsum("ij,ij->i", diff, diff) <= r2]
            keep.sort()
            groups.append(keep)

    if cap is not None:
        rng = rng_from(seed)
        for j in range(m):
            if len(groups[j]) > cap:
                pick = rng.choice(len(groups[j]), size=cap, replace=False)
                groups[j] = np.sort(groups[j][pick])
    return NeighborList.from_lists(groups)


def knn(source: PointCloud, queries: np.ndarray, k: int) -> np.ndarray:
    """The k nearest source indices per query, ascending by distance.

    Ties are broken by ascending source index. Returns (M, k) int64.
    """
    src = source.positions
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    n = src.shape[0]
    if k > n:
        raise KTooLarge(f"k={k} exceeds source size {n}")
    d2 = np.sum((queries[:, None, :] - src[None, :, :]) ** 2, axis=2)
    # Stable sort on distance keeps ascending-index tie order.
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def farthest_point_sample(cloud: PointCloud, m: int, seed: int = 0) -> np.ndarray:
    """Greedy max-min subsampling: m distinct indices.

    The first index is drawn uniformly from `seed`; each subsequent index
    maximizes distance to the already-selected set, ties broken by ascending
    index.
    """
    pts = cloud.positions
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise MTooLarge(f"m={m} outside [1, {n}]")
    rng = rng_from(seed)
    first = int(rng.integers(0, n))
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = first
    min_d2 = np.sum((pts - pts[first]) ** 2, axis=1)
    min_d2[first] = -1.0  # sentinel keeps selected (or duplicated) points out
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))  # argmax takes the lowest index on ties
        chosen[i] = nxt
        d2 = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[nxt] = -1.0
    return chosen
