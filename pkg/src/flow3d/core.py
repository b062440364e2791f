"""Shared domain types, error hierarchy, and the deterministic RNG contract.

All stochastic operations in this package take an explicit 64-bit seed and
use numpy's Philox counter-based generator, so equal inputs plus equal seed
give bit-identical results on one platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class Flow3DError(Exception):
    """Base class for all package errors."""


class NonFinite(Flow3DError):
    pass


class FeatureLengthMismatch(Flow3DError):
    pass


class EmptyCloud(Flow3DError):
    pass


class InvalidRadius(Flow3DError):
    pass


class KTooLarge(Flow3DError):
    pass


class MTooLarge(Flow3DError):
    pass


class ShapeMismatch(Flow3DError):
    pass


class InvalidSpec(Flow3DError):
    pass


class FeatureWidthMismatch(Flow3DError):
    pass


class TooFewSourcePoints(Flow3DError):
    pass


class EmptyGroup(Flow3DError):
    pass


class NoGroundTruth(Flow3DError):
    pass


class AllPointsMasked(Flow3DError):
    pass


class AllMasked(Flow3DError):
    pass


class LengthMismatch(Flow3DError):
    pass


class EmptyDataset(Flow3DError):
    pass


class InvalidConfig(Flow3DError):
    pass


class BadIntrinsics(Flow3DError):
    pass


class DegenerateConfiguration(Flow3DError):
    pass


class BadMagic(Flow3DError):
    pass


class VersionMismatch(Flow3DError):
    pass


class TruncatedFile(Flow3DError):
    pass


# ---------------------------------------------------------------------------
# RNG contract
# ---------------------------------------------------------------------------

def rng_from(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by an explicit 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def derive_seed(seed: int, *tags: int) -> int:
    """Derive a child seed from a parent seed and integer tags.

    Pure function of its arguments; used to give every stochastic stage of a
    larger computation its own independent stream.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(int(t) for t in tags))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

def _as_f64(a, name: str, cols: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if cols is not None:
        if arr.ndim != 2 or arr.shape[1] != cols:
            raise ShapeMismatch(f"{name} must be (N, {cols}), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class PointCloud:
    """A set of 3D points in meters, with optional per-point feature channels."""

    positions: np.ndarray                 # (N, 3) float64
    features: Optional[np.ndarray] = None  # (N, c) float64 or None

    def __post_init__(self):
        object.__setattr__(self, "positions", _as_f64(self.positions, "positions", 3))
        if self.features is not None:
            object.__setattr__(self, "features", _as_f64(self.features, "features"))

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_width(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def translated(self, t) -> "PointCloud":
        return PointCloud(self.positions + np.asarray(t, dtype=np.float64),
                          self.features)


def validate_cloud(cloud: PointCloud) -> None:
    """Raise if the cloud violates its invariants.

    Raises:
        EmptyCloud: no points.
        NonFinite: any NaN/Inf coordinate or feature entry.
        FeatureLengthMismatch: feature row count differs from point count.
    """
    if len(cloud) < 1:
        raise EmptyCloud("cloud has no points")
    if not np.isfinite(cloud.positions).all():
        raise NonFinite("cloud positions contain NaN/Inf")
    if cloud.features is not None:
        if cloud.features.shape[0] != len(cloud):
            raise FeatureLengthMismatch(
                f"{cloud.features.shape[0]} feature rows for {len(cloud)} points")
        if not np.isfinite(cloud.features).all():
            raise NonFinite("cloud features contain NaN/Inf")


@dataclass(frozen=True)
class FlowField:
    """Per-point 3D motion vectors (meters per frame interval)."""

    vectors: np.ndarray  # (N, 3) float64

    def __post_init__(self):
        object.__setattr__(self, "vectors", _as_f64(self.vectors, "vectors", 3))

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=1)


_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion: x -> R x + t."""

    rotation: np.ndarray     # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ShapeMismatch(f"rotation must be 3x3, got {R.shape}")
        if not np.allclose(R @ R.T, np.eye(3), atol=_ORTHO_TOL):
            raise DegenerateConfiguration("rotation is not orthonormal")
        if not np.isclose(np.linalg.det(R), 1.0, atol=_ORTHO_TOL):
            raise DegenerateConfiguration("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        K = np.array([[0.0, -axis[2], axis[1]],
                      [axis[2], 0.0, -axis[0]],
                      [-axis[1], axis[0], 0.0]])
        R = np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
        # Re-orthonormalize so the constructor tolerance holds exactly.
        u, _, vt = np.linalg.svd(R)
        return RigidTransform(u @ vt, np.asarray(translation, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: x -> self(other(x))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def angle(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class SceneSample:
    """Two frames plus optional supervision: ground-truth flow and a validity mask.

    mask[i] = True means point i of frame1 is supervised; isolated and
    occluded points carry False.
    """

    frame1: PointCloud
    frame2: PointCloud
    gt_flow: Optional[FlowField] = None
    mask: Optional[np.ndarray] = None  # (N1,) bool

    def __post_init__(self):
        if self.gt_flow is not None and len(self.gt_flow) != len(self.frame1):
            raise LengthMismatch("gt_flow length differs from frame1")
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool).reshape(-1)
            if m.shape[0] != len(self.frame1):
                raise LengthMismatch("mask length differs from frame1")
            object.__setattr__(self, "mask", m)

    def supervision_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(len(self.frame1), dtype=bool)
        return self.mask
