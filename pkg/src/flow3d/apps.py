"""Applications of the estimated flow: scan registration, motion
segmentation, and runtime benchmarking.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .core import FlowField, PointCloud, RigidTransform, derive_seed
from .inference import predict_resampled
from .metrics import rigid_fit
from .model import ModelParams, ModelSpec

PredictFn = Callable[[PointCloud, PointCloud, int], FlowField]


def network_predictor(spec: ModelSpec, params: ModelParams,
                      runs: int = 1) -> PredictFn:
    """Wrap a trained network as a (frame1, frame2, seed) -> flow function."""
    def predict(frame1: PointCloud, frame2: PointCloud, seed: int) -> FlowField:
        flow, _ = predict_resampled(spec, params, frame1, frame2, runs, seed)
        return flow
    return predict


def register_scans(predict: PredictFn, frame1: PointCloud, frame2: PointCloud,
                   passes: int = 2, seed: int = 0
                   ) -> Tuple[RigidTransform, PointCloud, FlowField]:
    """Estimate a rigid motion between two scans via predicted flow.

    Regresses the flow `passes` times (each pass predicts a residual from
    the already-shifted cloud), then fits a rigid transform from frame1 to
    frame1 + total flow: that pair has exact one-to-one correspondence by
    construction. Returns (transform, transformed frame1, total flow).
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    total = np.zeros((len(frame1), 3))
    for k in range(passes):
        shifted = PointCloud(frame1.positions + total)
        residual = predict(shifted, frame2, derive_seed(seed, k))
        total += residual.vectors
    transform = rigid_fit(frame1.positions, frame1.positions + total)
    return transform, PointCloud(transform.apply(frame1.positions)), FlowField(total)


@dataclass(frozen=True)
class SegmentationResult:
    labels: np.ndarray  # (N,) int, -1 = unclustered
    cluster_count: int


def motion_segment(frame1: PointCloud, flow: FlowField, lam: float = 3.0,
                   eps: float = 0.3, min_cluster_size: int = 30
                   ) -> SegmentationResult:
    """Cluster points by position and scaled flow.

    Builds 6-D vectors (x, y, z, lam*d) and finds single-linkage connected
    components under Euclidean distance <= eps; components below
    min_cluster_size get label -1. Cluster ids are canonicalized by each
    cluster's lowest member index, so the result is order-invariant.
    """
    if lam < 0 or eps <= 0:
        raise ValueError("require lam >= 0 and eps > 0")
    pts = np.concatenate([frame1.positions, lam * flow.vectors], axis=1)
    n = pts.shape[0]
    tree = cKDTree(pts)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    if pairs.size:
        adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])),
                         shape=(n, n))
    else:
        adj = coo_matrix((n, n))
    _, comp = connected_components(adj, directed=False)
    labels = np.full(n, -1, dtype=np.int64)
    next_id = 0
    # visit components in order of their lowest member index
    seen = set()
    firsts = []
    for i in range(n):
        c = comp[i]
        if c not in seen:
            seen.add(c)
            firsts.append(c)
    for c in firsts:
        members = np.flatnonzero(comp == c)
        if members.size >= min_cluster_size:
            labels[members] = next_id
            next_id += 1
    return SegmentationResult(labels, next_id)


@dataclass(frozen=True)
class BenchRow:
    points: int
    batch: int
    median_ms: float


def bench(spec: ModelSpec, params: ModelParams,
          sizes: Sequence[Tuple[int, int]], repeats: int = 5,
          seed: int = 0) -> List[BenchRow]:
    """Median wall time of a forward pass per (points, batch) row."""
    from .core import rng_from
    from .model import forward
    rows = []
    for n, batch in sizes:
        rng = rng_from(derive_seed(seed, n, batch))
        f1 = PointCloud(rng.uniform(-2, 2, size=(n, 3)))
        f2 = PointCloud(rng.uniform(-2, 2, size=(n, 3)))
        times = []
        for r in range(max(5, repeats)):
            t0 = time.perf_counter()
            for _ in range(batch):
                forward(spec, params, f1, f2, "infer", derive_seed(seed, r))
            times.append((time.perf_counter() - t0) * 1000.0)
        rows.append(BenchRow(n, batch, float(np.median(times))))
    return rows
