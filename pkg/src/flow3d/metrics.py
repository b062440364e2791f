"""Flow metrics (EPE, accuracy, outlier ratio), rigid fitting, ICP, and
RANSAC ground removal.

Accuracy counts a point when its error beats the absolute OR the relative
threshold; a point is an outlier only when it misses both (the two bounds
name escape routes, so the outlier rule is the conjunction).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .core import (AllMasked, DegenerateConfiguration, FlowField,
                   LengthMismatch, PointCloud, RigidTransform, rng_from)
from .spatial import knn

REL_FLOOR = 1e-10


@dataclass(frozen=True)
class MetricReport:
    epe: float
    acc_strict: float
    acc_relaxed: float
    outlier_ratio: float
    point_count: int

    def lines(self):
        return [f"epe={self.epe:.6g}",
                f"acc_strict={self.acc_strict:.6g}",
                f"acc_relaxed={self.acc_relaxed:.6g}",
                f"outlier_ratio={self.outlier_ratio:.6g}",
                f"point_count={self.point_count}"]


def _checked(pred: FlowField, gt: FlowField, mask) -> Tuple[np.ndarray, np.ndarray]:
    if len(pred) != len(gt):
        raise LengthMismatch(f"pred/gt lengths differ: {len(pred)} vs {len(gt)}")
    if mask is None:
        mask = np.ones(len(pred), dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[0] != len(pred):
            raise LengthMismatch("mask length differs from flow")
    if not mask.any():
        raise AllMasked("no supervised points")
    err = np.linalg.norm(pred.vectors[mask] - gt.vectors[mask], axis=1)
    gt_mag = np.linalg.norm(gt.vectors[mask], axis=1)
    return err, gt_mag


def epe(pred: FlowField, gt: FlowField, mask=None) -> float:
    """Mean L2 distance between predicted and ground-truth flow vectors."""
    err, _ = _checked(pred, gt, mask)
    return float(err.mean())


def acc(pred: FlowField, gt: FlowField, mask=None,
        abs_thresh: float = 0.05, rel_thresh: float = 0.05) -> float:
    """Fraction of points below the absolute or relative error threshold."""
    err, gt_mag = _checked(pred, gt, mask)
    rel = err / np.maximum(gt_mag, REL_FLOOR)
    return float(((err < abs_thresh) | (rel < rel_thresh)).mean())


def outlier_ratio(pred: FlowField, gt: FlowField, mask=None,
                  abs_thresh: float = 0.3, rel_thresh: float = 0.05) -> float:
    """Fraction of points exceeding both the absolute and relative bounds."""
    err, gt_mag = _checked(pred, gt, mask)
    rel = err / np.maximum(gt_mag, REL_FLOOR)
    return float(((err > abs_thresh) & (rel > rel_thresh)).mean())


def metric_report(pred: FlowField, gt: FlowField, mask=None) -> MetricReport:
    err, _ = _checked(pred, gt, mask)
    return MetricReport(
        epe=epe(pred, gt, mask),
        acc_strict=acc(pred, gt, mask, 0.05, 0.05),
        acc_relaxed=acc(pred, gt, mask, 0.1, 0.10),
        outlier_ratio=outlier_ratio(pred, gt, mask),
        point_count=int(err.shape[0]))


# ---------------------------------------------------------------------------
# Rigid fitting and ICP
# ---------------------------------------------------------------------------

def rigid_fit(src: np.ndarray, dst: np.ndarray,
              weights: Optional[np.ndarray] = None) -> RigidTransform:
    """Least-squares rotation + translation mapping src onto dst.

    Cross-covariance SVD with a determinant guard against reflections.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.shape[0] < 3:
        raise DegenerateConfiguration("need matching point sets of size >= 3")
    if weights is None:
        w = np.full(src.shape[0], 1.0 / src.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        total = w.sum()
        if total <= 0:
            raise DegenerateConfiguration("weights sum to zero")
        w = w / total
    mu_s = w @ src
    mu_d = w @ dst
    H = (src - mu_s).T @ (w[:, None] * (dst - mu_d))
    u, s, vt = np.linalg.svd(H)
    if s[1] < 1e-12 * max(s[0], 1e-300):
        raise DegenerateConfiguration("source points are (near) collinear")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    D = np.diag([1.0, 1.0, d])
    R = vt.T @ D @ u.T
    t = mu_d - R @ mu_s
    return RigidTransform(R, t)


def icp(frame1: PointCloud, frame2: PointCloud, max_iters: int = 50,
        tol: float = 1e-8) -> Tuple[RigidTransform, FlowField]:
    """Plain one-directional ICP: nearest neighbor, rigid fit, repeat.

    Stops when the mean correspondence distance improves by less than tol.
    Returns the global transform and the induced per-point flow.
    """
    src = frame1.positions
    dst = frame2.positions
    transform = RigidTransform.identity()
    moved = src.copy()
    prev = np.inf
    for _ in range(max_iters):
        idx = knn(frame2, moved, 1)[:, 0]
        corr = dst[idx]
        mean_dist = float(np.linalg.norm(corr - moved, axis=1).mean())
        if prev - mean_dist < tol:
            break
        prev = mean_dist
        step = rigid_fit(moved, corr)
        transform = step.compose(transform)
        moved = transform.apply(src)
    return transform, FlowField(moved - src)


# ---------------------------------------------------------------------------
# RANSAC ground removal
# ---------------------------------------------------------------------------

def remove_ground_ransac(cloud: PointCloud, iters: int = 200,
                         inlier_dist: float = 0.05, seed: int = 0
                         ) -> Tuple[np.ndarray, np.ndarray]:
    """Fit a (possibly tilted) plane by RANSAC and mask points close to it.

    Returns (ground mask, plane coefficients (a, b, c, d) with unit normal
    and a x + b y + c z + d = 0). The best 3-point hypothesis by inlier
    count (ties by first found) is refined once by least squares on its
    inliers.
    """
    pts = cloud.positions
    n = pts.shape[0]
    if n < 3:
        raise DegenerateConfiguration("need at least 3 points")
    rng = rng_from(seed)
    best_count = -1
    best_normal = None
    best_d = 0.0
    for _ in range(iters):
        idx = rng.choice(n, size=3, replace=False)
        a, b, c = pts[idx]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        d = -normal @ a
        count = int((np.abs(pts @ normal + d) <= inlier_dist).sum())
        if count > best_count:
            best_count, best_normal, best_d = count, normal, d
    if best_normal is None:
        raise DegenerateConfiguration("all hypotheses degenerate")
    inliers = np.abs(pts @ best_normal + best_d) <= inlier_dist
    normal, d = _plane_lsq(pts[inliers]) if inliers.sum() >= 3 else (best_normal, best_d)
    mask = np.abs(pts @ normal + d) <= inlier_dist
    return mask, np.concatenate([normal, [d]])


def _plane_lsq(pts: np.ndarray) -> Tuple[np.ndarray, float]:
    centroid = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    normal = vt[2]
    return normal, float(-normal @ centroid)
