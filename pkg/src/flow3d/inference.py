"""Inference orchestration: multi-resample averaging and chunked prediction
for scenes too large to run whole.

Chunks are squares in the XY plane (Z up) laid at a fixed stride over the
bounding box, each center jittered along one randomly chosen axis. Frame-2
points for a chunk come from the same window enlarged by the flow-embedding
radius so cross-boundary correspondences stay visible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .core import FlowField, PointCloud, derive_seed, rng_from
from .model import ModelParams, ModelSpec, forward


@dataclass(frozen=True)
class ChunkSpec:
    edge: float = 5.0
    stride: float = 2.5
    jitter_sigma: float = 0.3

    def __post_init__(self):
        if not 0 < self.stride <= self.edge:
            raise ValueError("require 0 < stride <= edge")


def predict_resampled(spec: ModelSpec, params: ModelParams, frame1: PointCloud,
                      frame2: PointCloud, runs: int = 10, seed: int = 0
                      ) -> Tuple[FlowField, np.ndarray]:
    """Average the predicted flow over `runs` independently seeded passes.

    Each run re-draws every stochastic choice (FPS starts, neighbor-cap
    subsets). Returns (mean flow, isolation mask true only where every run
    flagged the point). Runs in infer mode: batch-norm layers apply the
    running statistics accumulated during training.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    total = np.zeros((len(frame1), 3))
    iso_all = np.ones(len(frame1), dtype=bool)
    for k in range(runs):
        flow, _, iso = forward(spec, params, frame1, frame2, "infer",
                               derive_seed(seed, k))
        total += flow.vectors
        iso_all &= iso
    return FlowField(total / runs), iso_all


def predict_chunked(spec: ModelSpec, params: ModelParams, frame1: PointCloud,
                    frame2: PointCloud, chunk: ChunkSpec = ChunkSpec(),
                    runs: int = 10, seed: int = 0
                    ) -> Tuple[FlowField, np.ndarray]:
    """Chunked large-scene prediction with overlap averaging.

    Frame-1 points covered by several chunks get the mean of the per-chunk
    predictions; points covered by none (possible at jittered borders, or
    when a chunk has no frame-2 points) get zero flow and an isolation flag.
    """
    p1 = frame1.positions
    p2 = frame2.positions
    lo = p1[:, :2].min(axis=0)
    hi = p1[:, :2].max(axis=0)
    half = chunk.edge / 2.0
    fe_radius = spec.embed.radius
    rng = rng_from(derive_seed(seed, 0))

    sums = np.zeros((p1.shape[0], 3))
    counts = np.zeros(p1.shape[0])
    xs = np.arange(lo[0], hi[0] + chunk.stride, chunk.stride)
    ys = np.arange(lo[1], hi[1] + chunk.stride, chunk.stride)
    chunk_id = 0
    for cx in xs:
        for cy in ys:
            center = np.array([cx, cy])
            if chunk.jitter_sigma > 0:
                axis = int(rng.integers(0, 2))  # jitter one axis per chunk
                center = center.copy()
                center[axis] += rng.normal(0.0, chunk.jitter_sigma)
            in1 = np.all(np.abs(p1[:, :2] - center) <= half, axis=1)
            if not in1.any():
                chunk_id += 1
                continue
            in2 = np.all(np.abs(p2[:, :2] - center) <= half + fe_radius, axis=1)
            if in2.any():
                sub1 = PointCloud(p1[in1])
                sub2 = PointCloud(p2[in2])
                flow, iso = predict_resampled(spec, params, sub1, sub2, runs,
                                              derive_seed(seed, 1, chunk_id))
                idx = np.flatnonzero(in1)
                sums[idx] += flow.vectors
                counts[idx] += 1.0
            chunk_id += 1

    covered = counts > 0
    out = np.zeros_like(sums)
    out[covered] = sums[covered] / counts[covered, None]
    return FlowField(out), ~covered
