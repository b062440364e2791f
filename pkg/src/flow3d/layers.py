"""Learnable point-set layers: set conv, flow embedding, set upconv.

Each layer groups neighbors per center, runs a shared MLP over rows of
(feature, relative offset), and pools per group. Forward returns a tape and
backward produces exact gradients for the MLP parameters, the input
features, and every position that enters through a relative-offset term
(needed so the cycle-consistency loss can differentiate through the shifted
cloud of the second pass).

Ragged groups are flattened into one dense row matrix per layer call so the
MLP runs as a single stack of GEMMs.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Tuple

import numpy as np

from .core import (FeatureWidthMismatch, InvalidSpec, ShapeMismatch,
                   TooFewSourcePoints, derive_seed)
from .nn import (MlpParams, MlpSpec, MlpTape, PoolTape, mlp_backward,
                 mlp_forward, set_pool, set_pool_backward)
from .spatial import NeighborList, farthest_point_sample, knn, radius_neighbors

DEFAULT_CONV_CAP = 16
DEFAULT_EMBED_CAP = 64
COSINE_EPS = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    """Hyperparameters of one layer (one row of the architecture table)."""

    kind: str                      # "set_conv" | "flow_embedding" | "set_upconv"
    radius: float
    sample_rate: Fraction
    mlp_widths: Tuple[int, ...]
    neighbor_cap: int = DEFAULT_CONV_CAP
    pooling: str = "max"           # "max" | "avg"
    mixing: str = "learned"        # flow_embedding only: "learned" | "cosine" | "dot"

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidSpec(f"radius must be > 0, got {self.radius}")
        if not self.mlp_widths:
            raise InvalidSpec("mlp_widths must be non-empty")
        if self.neighbor_cap < 1:
            raise InvalidSpec("neighbor_cap must be >= 1")
        if self.kind not in ("set_conv", "flow_embedding", "set_upconv"):
            raise InvalidSpec(f"unknown layer kind {self.kind!r}")
        if self.mixing not in ("learned", "cosine", "dot"):
            raise InvalidSpec(f"unknown mixing {self.mixing!r}")
        object.__setattr__(self, "sample_rate", Fraction(self.sample_rate))

    def mlp_spec(self) -> MlpSpec:
        return MlpSpec(self.mlp_widths, use_batchnorm=True, final_activation="relu")

    def mlp_input_width(self, feat_width: int, other_feat_width: int = 0) -> int:
        if self.kind == "flow_embedding":
            if self.mixing == "learned":
                return feat_width + other_feat_width + 3
            return 4  # (feature distance scalar, displacement)
        return feat_width + 3


def _feat_or_empty(features: Optional[np.ndarray], n: int) -> np.ndarray:
    if features is None:
        return np.empty((n, 0))
    return np.asarray(features, dtype=np.float64)


@dataclass
class GroupTape:
    """Shared grouping bookkeeping for conv-style layers."""

    neighbors: NeighborList
    group_of_row: np.ndarray     # (R,) group index per flattened row
    nonempty: np.ndarray         # (M,) bool, groups that produced rows
    mlp_tape: MlpTape
    pool_tape: PoolTape
    feat_width: int
    n_source: int


# ---------------------------------------------------------------------------
# set conv
# ---------------------------------------------------------------------------

@dataclass
class SetConvTape:
    spec: LayerSpec
    center_idx: np.ndarray
    group: GroupTape


def set_conv_forward(spec: LayerSpec, params: MlpParams, positions: np.ndarray,
                     features: Optional[np.ndarray], seed: int,
                     mode: str = "train"
                     ) -> Tuple[np.ndarray, np.ndarray, SetConvTape]:
    """Sub-sample centers by FPS and pool an MLP over each r-ball.

    Returns (center positions (M,3), center features (M,c'), tape). Every
    center is an input point and therefore belongs to its own ball, so
    groups are never empty here.
    """
    if spec.kind != "set_conv":
        raise InvalidSpec(f"expected set_conv spec, got {spec.kind}")
    if spec.sample_rate > 1:
        raise InvalidSpec("set_conv sample_rate must be <= 1")
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    feats = _feat_or_empty(features, n)
    m = max(1, round(n * float(spec.sample_rate)))
    center_idx = farthest_point_sample(
        _Cloud(positions), m, derive_seed(seed, 0))
    centers = positions[center_idx]
    neighbors = radius_neighbors(_Cloud(positions), centers, spec.radius,
                                 cap=spec.neighbor_cap, seed=derive_seed(seed, 1))
    counts = neighbors.counts()
    group_of_row = np.repeat(np.arange(m), counts)
    rows = np.concatenate(
        [feats[neighbors.indices],
         positions[neighbors.indices] - centers[group_of_row]], axis=1)
    out_rows, mlp_tape = mlp_forward(spec.mlp_spec(), params, rows, mode)
    pooled, pool_tape = set_pool(out_rows, neighbors.offsets, spec.pooling)
    tape = SetConvTape(spec, center_idx,
                       GroupTape(neighbors, group_of_row,
                                 np.ones(m, dtype=bool), mlp_tape, pool_tape,
                                 feats.shape[1], n))
    return centers, pooled, tape


def set_conv_backward(tape: SetConvTape, grad_feat_out: np.ndarray,
                      grad_centers: Optional[np.ndarray] = None
                      ) -> Tuple[np.ndarray, np.ndarray, MlpParams]:
    """Gradients wrt source features, source positions, and MLP params.

    grad_centers carries any downstream gradient on the output center
    positions (they are source points, so it folds into the position grad).
    """
    g = tape.group
    grad_rows = set_pool_backward(g.pool_tape, grad_feat_out)
    grad_in_rows, grad_params = mlp_backward(g.mlp_tape, grad_rows)
    c = g.feat_width
    gf_rows = grad_in_rows[:, :c]
    gd_rows = grad_in_rows[:, c:]
    grad_feats = np.zeros((g.n_source, c))
    np.add.at(grad_feats, g.neighbors.indices, gf_rows)
    grad_pos = np.zeros((g.n_source, 3))
    np.add.at(grad_pos, g.neighbors.indices, gd_rows)
    # centers get the negated displacement grads, plus downstream center grads
    gd_per_center = np.zeros((len(tape.center_idx), 3))
    np.add.at(gd_per_center, g.group_of_row, gd_rows)
    total_center = -gd_per_center
    if grad_centers is not None:
        total_center = total_center + grad_centers
    np.add.at(grad_pos, tape.center_idx, total_center)
    return grad_feats, grad_pos, grad_params


# ---------------------------------------------------------------------------
# flow embedding
# ---------------------------------------------------------------------------

@dataclass
class FlowEmbeddingTape:
    spec: LayerSpec
    group: GroupTape
    n_frame2: int
    feat1: np.ndarray
    feat2: np.ndarray
    dist_rows: Optional[np.ndarray]  # cosine/dot mixing: per-row scalar


def flow_embedding_forward(spec: LayerSpec, params: MlpParams,
                           pos1: np.ndarray, feat1: np.ndarray,
                           pos2: np.ndarray, feat2: np.ndarray, seed: int,
                           mode: str = "train"
                           ) -> Tuple[np.ndarray, np.ndarray, FlowEmbeddingTape]:
    """Per frame-1 point, pool an MLP over its frame-2 r-neighborhood.

    Learned mixing feeds (f_i, g_j, y_j - x_i) to the MLP; cosine/dot mixing
    feeds (dist(f_i, g_j), y_j - x_i). Points with no frame-2 neighbor get a
    zero embedding and a True entry in the returned isolation mask.
    Returns (embeddings (N1, c'), isolation mask (N1,), tape).
    """
    if spec.kind != "flow_embedding":
        raise InvalidSpec(f"expected flow_embedding spec, got {spec.kind}")
    pos1 = np.asarray(pos1, dtype=np.float64)
    pos2 = np.asarray(pos2, dtype=np.float64)
    feat1 = _feat_or_empty(feat1, pos1.shape[0])
    feat2 = _feat_or_empty(feat2, pos2.shape[0])
    if feat1.shape[1] != feat2.shape[1]:
        raise FeatureWidthMismatch(
            f"frame feature widths differ: {feat1.shape[1]} vs {feat2.shape[1]}")
    n1 = pos1.shape[0]
    neighbors = radius_neighbors(_Cloud(pos2), pos1, spec.radius,
                                 cap=spec.neighbor_cap, seed=derive_seed(seed, 0))
    counts = neighbors.counts()
    nonempty = counts > 0
    group_of_row = np.repeat(np.arange(n1), counts)
    disp = pos2[neighbors.indices] - pos1[group_of_row]
    dist_rows = None
    if spec.mixing == "learned":
        rows = np.concatenate(
            [feat1[group_of_row], feat2[neighbors.indices], disp], axis=1)
    else:
        f = feat1[group_of_row]
        g_ = feat2[neighbors.indices]
        s = np.einsum("ij,ij->i", f, g_)
        if spec.mixing == "cosine":
            nf = np.linalg.norm(f, axis=1) + COSINE_EPS
            ng = np.linalg.norm(g_, axis=1) + COSINE_EPS
            dist_rows = s / (nf * ng)
        else:
            dist_rows = s
        rows = np.concatenate([dist_rows[:, None], disp], axis=1)
    c_out = spec.mlp_widths[-1]
    embeddings = np.zeros((n1, c_out))
    if nonempty.any():
        out_rows, mlp_tape = mlp_forward(spec.mlp_spec(), params, rows, mode)
        sub_offsets = np.concatenate([[0], np.cumsum(counts[nonempty])])
        pooled, pool_tape = set_pool(out_rows, sub_offsets, spec.pooling)
        embeddings[nonempty] = pooled
    else:
        mlp_tape = MlpTape(spec.mlp_spec(), params)
        pool_tape = PoolTape(spec.pooling, np.zeros(1, np.int64), 0)
    tape = FlowEmbeddingTape(
        spec, GroupTape(neighbors, group_of_row, nonempty, mlp_tape, pool_tape,
                        feat1.shape[1], n1),
        pos2.shape[0], feat1, feat2, dist_rows)
    return embeddings, ~nonempty, tape


def flow_embedding_backward(tape: FlowEmbeddingTape, grad_emb: np.ndarray
                            ) -> Tuple[np.ndarray, np.ndarray, np.ndarray,
                                       np.ndarray, MlpParams]:
    """Gradients wrt (feat1, feat2, pos1, pos2, params)."""
    spec = tape.spec
    g = tape.group
    n1, n2, c = g.n_source, tape.n_frame2, g.feat_width
    grad_f1 = np.zeros((n1, c))
    grad_f2 = np.zeros((n2, c))
    grad_p1 = np.zeros((n1, 3))
    grad_p2 = np.zeros((n2, 3))
    if g.neighbors.indices.shape[0] == 0:
        from .nn import zero_grads_like
        return grad_f1, grad_f2, grad_p1, grad_p2, zero_grads_like(g.mlp_tape.params)
    grad_rows = set_pool_backward(g.pool_tape, grad_emb[g.nonempty])
    grad_in_rows, grad_params = mlp_backward(g.mlp_tape, grad_rows)
    idx2 = g.neighbors.indices
    if spec.mixing == "learned":
        gf1_rows = grad_in_rows[:, :c]
        gf2_rows = grad_in_rows[:, c:2 * c]
        gd_rows = grad_in_rows[:, 2 * c:]
        np.add.at(grad_f1, g.group_of_row, gf1_rows)
        np.add.at(grad_f2, idx2, gf2_rows)
    else:
        gdist = grad_in_rows[:, 0]
        gd_rows = grad_in_rows[:, 1:]
        f = tape.feat1[g.group_of_row]
        g_ = tape.feat2[idx2]
        if spec.mixing == "dot":
            np.add.at(grad_f1, g.group_of_row, gdist[:, None] * g_)
            np.add.at(grad_f2, idx2, gdist[:, None] * f)
        else:
            nf_raw = np.linalg.norm(f, axis=1)
            ng_raw = np.linalg.norm(g_, axis=1)
            nf = nf_raw + COSINE_EPS
            ng = ng_raw + COSINE_EPS
            s = np.einsum("ij,ij->i", f, g_)
            # d = s / (nf ng); subgradient 0 for the norm at exactly zero
            fhat = np.where(nf_raw[:, None] > 0, f / np.maximum(nf_raw, 1e-300)[:, None], 0.0)
            ghat = np.where(ng_raw[:, None] > 0, g_ / np.maximum(ng_raw, 1e-300)[:, None], 0.0)
            gf_rows = gdist[:, None] * (g_ / (nf * ng)[:, None]
                                        - (s / (nf * nf * ng))[:, None] * fhat)
            gg_rows = gdist[:, None] * (f / (nf * ng)[:, None]
                                        - (s / (nf * ng * ng))[:, None] * ghat)
            np.add.at(grad_f1, g.group_of_row, gf_rows)
            np.add.at(grad_f2, idx2, gg_rows)
    np.add.at(grad_p2, idx2, gd_rows)
    gd_per_center = np.zeros((n1, 3))
    np.add.at(gd_per_center, g.group_of_row, gd_rows)
    grad_p1 -= gd_per_center
    return grad_f1, grad_f2, grad_p1, grad_p2, grad_params


# ---------------------------------------------------------------------------
# set upconv
# ---------------------------------------------------------------------------

@dataclass
class SetUpconvTape:
    spec: LayerSpec
    group: GroupTape
    n_targets: int
    skip_width: int


def set_upconv_forward(spec: LayerSpec, params: MlpParams,
                       src_pos: np.ndarray, src_feat: Optional[np.ndarray],
                       targets: np.ndarray,
                       target_skip_features: Optional[np.ndarray] = None,
                       seed: int = 0, mode: str = "train"
                       ) -> Tuple[np.ndarray, np.ndarray, SetUpconvTape]:
    """Set conv math evaluated at caller-specified target coordinates.

    Targets with no source point inside r get a zero pooled feature and a
    True isolation flag. Skip features, when given, are concatenated after
    the pooled output. Returns (features (M, c'+skip), isolation, tape).
    """
    if spec.kind != "set_upconv":
        raise InvalidSpec(f"expected set_upconv spec, got {spec.kind}")
    src_pos = np.asarray(src_pos, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    feats = _feat_or_empty(src_feat, src_pos.shape[0])
    m = targets.shape[0]
    neighbors = radius_neighbors(_Cloud(src_pos), targets, spec.radius,
                                 cap=spec.neighbor_cap, seed=derive_seed(seed, 0))
    counts = neighbors.counts()
    nonempty = counts > 0
    group_of_row = np.repeat(np.arange(m), counts)
    rows = np.concatenate(
        [feats[neighbors.indices],
         src_pos[neighbors.indices] - targets[group_of_row]], axis=1)
    c_out = spec.mlp_widths[-1]
    pooled_full = np.zeros((m, c_out))
    if nonempty.any():
        out_rows, mlp_tape = mlp_forward(spec.mlp_spec(), params, rows, mode)
        sub_offsets = np.concatenate([[0], np.cumsum(counts[nonempty])])
        pooled, pool_tape = set_pool(out_rows, sub_offsets, spec.pooling)
        pooled_full[nonempty] = pooled
    else:
        mlp_tape = MlpTape(spec.mlp_spec(), params)
        pool_tape = PoolTape(spec.pooling, np.zeros(1, np.int64), 0)
    skip_width = 0
    if target_skip_features is not None:
        skip = np.asarray(target_skip_features, dtype=np.float64)
        if skip.shape[0] != m:
            raise ShapeMismatch("skip feature rows must match target count")
        skip_width = skip.shape[1]
        pooled_full = np.concatenate([pooled_full, skip], axis=1)
    tape = SetUpconvTape(
        spec, GroupTape(neighbors, group_of_row, nonempty, mlp_tape, pool_tape,
                        feats.shape[1], src_pos.shape[0]),
        m, skip_width)
    return pooled_full, ~nonempty, tape


def set_upconv_backward(tape: SetUpconvTape, grad_out: np.ndarray
                        ) -> Tuple[np.ndarray, np.ndarray, np.ndarray,
                                   Optional[np.ndarray], MlpParams]:
    """Gradients wrt (src features, src positions, targets, skip, params)."""
    g = tape.group
    c_out = tape.spec.mlp_widths[-1]
    grad_skip = None
    if tape.skip_width:
        grad_skip = np.asarray(grad_out[:, c_out:], dtype=np.float64).copy()
        grad_out = grad_out[:, :c_out]
    grad_feats = np.zeros((g.n_source, g.feat_width))
    grad_src_pos = np.zeros((g.n_source, 3))
    grad_targets = np.zeros((tape.n_targets, 3))
    if g.neighbors.indices.shape[0] == 0:
        from .nn import zero_grads_like
        return (grad_feats, grad_src_pos, grad_targets, grad_skip,
                zero_grads_like(g.mlp_tape.params))
    grad_rows = set_pool_backward(g.pool_tape, grad_out[g.nonempty])
    grad_in_rows, grad_params = mlp_backward(g.mlp_tape, grad_rows)
    c = g.feat_width
    np.add.at(grad_feats, g.neighbors.indices, grad_in_rows[:, :c])
    gd_rows = grad_in_rows[:, c:]
    np.add.at(grad_src_pos, g.neighbors.indices, gd_rows)
    np.add.at(grad_targets, g.group_of_row, -gd_rows)
    return grad_feats, grad_src_pos, grad_targets, grad_skip, grad_params


# ---------------------------------------------------------------------------
# inverse-distance 3-interpolation (non-learned upsampling alternative)
# ---------------------------------------------------------------------------

@dataclass
class ThreeInterpTape:
    idx: np.ndarray      # (M, 3)
    weights: np.ndarray  # (M, 3)
    n_source: int


def three_interp(src_pos: np.ndarray, src_feat: np.ndarray,
                 targets: np.ndarray) -> Tuple[np.ndarray, ThreeInterpTape]:
    """Normalized inverse-distance interpolation from the 3 nearest sources."""
    src_pos = np.asarray(src_pos, dtype=np.float64)
    src_feat = np.asarray(src_feat, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    if src_pos.shape[0] < 3:
        raise TooFewSourcePoints("three_interp needs at least 3 source points")
    idx = knn(_Cloud(src_pos), targets, 3)
    d = np.linalg.norm(src_pos[idx] - targets[:, None, :], axis=2)
    w = 1.0 / np.maximum(d, 1e-10)
    w = w / w.sum(axis=1, keepdims=True)
    out = np.einsum("mk,mkc->mc", w, src_feat[idx])
    return out, ThreeInterpTape(idx, w, src_pos.shape[0])


def three_interp_backward(tape: ThreeInterpTape, grad_out: np.ndarray) -> np.ndarray:
    """Gradient wrt source features (positions are treated as fixed)."""
    g = np.asarray(grad_out, dtype=np.float64)
    grad_feat = np.zeros((tape.n_source, g.shape[1]))
    contrib = tape.weights[:, :, None] * g[:, None, :]
    np.add.at(grad_feat, tape.idx, contrib)
    return grad_feat


class _Cloud:
    """Lightweight positions-only adapter for the spatial primitives."""

    __slots__ = ("positions",)

    def __init__(self, positions: np.ndarray):
        self.positions = positions
