"""Synthetic rigid-motion scene generation, depth unprojection, persistence.

Scenes are built from a few randomly placed object surfaces (box, sphere
shell, cylinder shell, plane patch); each object gets its own rigid motion
drawn from configured ranges. Frame 2 is re-sampled independently on the
moved surfaces, so the two frames share no point-level correspondence.

File formats (binary, little-endian):

  Sample `FN3D`:  magic, version u32=1, flags u32 (bit0 has_flow, bit1
                  has_mask), n1 u32, n2 u32, frame1 n1x3 f32, frame2 n2x3
                  f32, [flow n1x3 f32], [mask n1 u8].
  Checkpoint `FN3C`: magic, version u32=1, length-prefixed UTF-8 JSON model
                  spec, tensor count u32, then per tensor: length-prefixed
                  name, rank u32, dims u32*, f32 payload.
  Flow `FN3F`:    magic, n u32, nx3 f32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import BinaryIO, Optional, Tuple

import numpy as np

from .core import (BadIntrinsics, BadMagic, FlowField, InvalidConfig,
                   PointCloud, RigidTransform, SceneSample, ShapeMismatch,
                   TruncatedFile, VersionMismatch, derive_seed, rng_from)
from .layers import LayerSpec
from .model import ModelParams, ModelSpec, init_model_params

SAMPLE_MAGIC = b"FN3D"
CHECKPOINT_MAGIC = b"FN3C"
FLOW_MAGIC = b"FN3F"


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

OBJECT_KINDS = ("box", "sphere-shell", "cylinder-shell", "plane-patch")


@dataclass(frozen=True)
class SceneConfig:
    object_count: Tuple[int, int] = (2, 4)
    object_kinds: Tuple[str, ...] = OBJECT_KINDS
    points_per_object: Tuple[int, int] = (64, 128)
    object_radius: Tuple[float, float] = (0.3, 0.8)
    translation_mag: Tuple[float, float] = (0.2, 0.8)
    rotation_mag: Tuple[float, float] = (0.0, 0.4)   # radians
    scene_extent: float = 2.5                         # objects placed in +-extent (XY)
    occlusion_fraction: float = 0.0
    noise_sigma: float = 0.0
    include_ground: bool = False
    ground_points: int = 128

    def validate(self) -> None:
        for name in ("object_count", "points_per_object", "object_radius",
                     "translation_mag", "rotation_mag"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise InvalidConfig(f"bad range for {name}: ({lo}, {hi})")
        if not 0.0 <= self.occlusion_fraction < 1.0:
            raise InvalidConfig("occlusion_fraction must be in [0, 1)")
        if self.noise_sigma < 0 or self.scene_extent <= 0:
            raise InvalidConfig("noise_sigma/scene_extent out of range")
        for k in self.object_kinds:
            if k not in OBJECT_KINDS:
                raise InvalidConfig(f"unknown object kind {k!r}")
        if not self.object_kinds:
            raise InvalidConfig("object_kinds must be non-empty")


def _sample_surface(kind: str, radius: float, n: int, rng) -> np.ndarray:
    """Points on a canonical object surface centered at the origin."""
    if kind == "sphere-shell":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * radius
    if kind == "box":
        # pick a face, then uniform on it
        half = radius
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-half, half, size=(n, 2))
        pts = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for a in range(3):
            sel = axis == a
            others = [x for x in range(3) if x != a]
            pts[sel, a] = sign[sel] * half
            pts[sel, others[0]] = uv[sel, 0]
            pts[sel, others[1]] = uv[sel, 1]
        return pts
    if kind == "cylinder-shell":
        theta = rng.uniform(0, 2 * np.pi, size=n)
        z = rng.uniform(-radius, radius, size=n)
        return np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)
    if kind == "plane-patch":
        uv = rng.uniform(-radius, radius, size=(n, 2))
        return np.concatenate([uv, np.zeros((n, 1))], axis=1)
    raise InvalidConfig(f"unknown object kind {kind!r}")


def _uniform_in(rng, lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi))


def rigid_flow(points: np.ndarray, transform: RigidTransform,
               center: np.ndarray) -> np.ndarray:
    """Motion of points under rotation about `center` plus translation."""
    moved = (points - center) @ transform.rotation.T + center + transform.translation
    return moved - points


def generate_scene(cfg: SceneConfig, seed: int) -> SceneSample:
    """One synthetic two-frame sample with exact ground-truth flow.

    Frame 2 is re-sampled on the moved surfaces (no correspondences).
    Occlusion drops the far side of a random half-space from frame 2 and
    masks out frame-1 points whose targets fall there. Sensor noise
    perturbs positions only, never the ground-truth flow.
    """
    cfg.validate()
    rng = rng_from(seed)
    n_obj = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))
    f1_parts, f2_parts, flow_parts = [], [], []
    for k in range(n_obj):
        kind = cfg.object_kinds[int(rng.integers(len(cfg.object_kinds)))]
        radius = _uniform_in(rng, *cfg.object_radius)
        n_pts = int(rng.integers(cfg.points_per_object[0],
                                 cfg.points_per_object[1] + 1))
        center = np.concatenate([
            rng.uniform(-cfg.scene_extent, cfg.scene_extent, size=2),
            rng.uniform(0.0, cfg.scene_extent, size=1)])
        orient = _random_rotation(rng)
        p1 = _sample_surface(kind, radius, n_pts, rng) @ orient.T + center
        p2 = _sample_surface(kind, radius, n_pts, rng) @ orient.T + center

        angle = _uniform_in(rng, *cfg.rotation_mag)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        t_mag = _uniform_in(rng, *cfg.translation_mag)
        t_dir = rng.normal(size=3)
        t_dir /= np.linalg.norm(t_dir)
        motion = RigidTransform.from_axis_angle(axis, angle, t_mag * t_dir)

        f1_parts.append(p1)
        flow_parts.append(rigid_flow(p1, motion, center))
        f2_parts.append(p2 + rigid_flow(p2, motion, center))

    if cfg.include_ground:
        ext = cfg.scene_extent
        g1 = np.concatenate([rng.uniform(-ext, ext, size=(cfg.ground_points, 2)),
                             np.zeros((cfg.ground_points, 1))], axis=1)
        g2 = np.concatenate([rng.uniform(-ext, ext, size=(cfg.ground_points, 2)),
                             np.zeros((cfg.ground_points, 1))], axis=1)
        f1_parts.append(g1)
        f2_parts.append(g2)
        flow_parts.append(np.zeros((cfg.ground_points, 3)))

    p1 = np.concatenate(f1_parts)
    p2 = np.concatenate(f2_parts)
    gt = np.concatenate(flow_parts)
    mask = np.ones(p1.shape[0], dtype=bool)

    if cfg.occlusion_fraction > 0:
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        proj2 = p2 @ normal
        thresh = np.quantile(proj2, 1.0 - cfg.occlusion_fraction)
        keep2 = proj2 <= thresh
        p2 = p2[keep2]
        mask &= (p1 + gt) @ normal <= thresh

    if cfg.noise_sigma > 0:
        p1 = p1 + rng.normal(scale=cfg.noise_sigma, size=p1.shape)
        p2 = p2 + rng.normal(scale=cfg.noise_sigma, size=p2.shape)

    return SceneSample(PointCloud(p1), PointCloud(p2), FlowField(gt), mask)


def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])


# ---------------------------------------------------------------------------
# Depth unprojection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 1050.0
    fy: float = 1050.0
    cx: float = 479.5
    cy: float = 269.5

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise BadIntrinsics("focal lengths must be positive")


def unproject_depth(depth: np.ndarray, intrinsics: CameraIntrinsics,
                    z_cutoff: float = 35.0) -> PointCloud:
    """Lift a depth map to a point cloud, dropping far/invalid pixels.

    Pixels with 0 < Z <= z_cutoff map to X=(u-cx)Z/fx, Y=(v-cy)Z/fy; the
    rest (non-positive, non-finite, or beyond the cutoff) are discarded.
    """
    intrinsics.validate()
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w]
    z = depth.ravel()
    valid = np.isfinite(z) & (z > 0) & (z <= z_cutoff)
    z = z[valid]
    u = u.ravel()[valid].astype(np.float64)
    v = v.ravel()[valid].astype(np.float64)
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    return PointCloud(np.stack([x, y, z], axis=1))


def project_point(point: np.ndarray, intrinsics: CameraIntrinsics) -> Tuple[float, float]:
    """Inverse of unproject_depth for a single point (pixel coordinates)."""
    x, y, z = point
    return (intrinsics.fx * x / z + intrinsics.cx,
            intrinsics.fy * y / z + intrinsics.cy)


# ---------------------------------------------------------------------------
# Binary persistence
# ---------------------------------------------------------------------------

def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFile(f"expected {n} bytes, got {len(buf)}")
    return buf


def _write_f32(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_f32(fh: BinaryIO, shape) -> np.ndarray:
    n = int(np.prod(shape))
    raw = _read_exact(fh, 4 * n)
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def write_sample(path, sample: SceneSample) -> None:
    flags = (1 if sample.gt_flow is not None else 0) | \
            (2 if sample.mask is not None else 0)
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack("<III", 1, flags, len(sample.frame1)))
        fh.write(struct.pack("<I", len(sample.frame2)))
        _write_f32(fh, sample.frame1.positions)
        _write_f32(fh, sample.frame2.positions)
        if sample.gt_flow is not None:
            _write_f32(fh, sample.gt_flow.vectors)
        if sample.mask is not None:
            fh.write(sample.mask.astype(np.uint8).tobytes())


def read_sample(path) -> SceneSample:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != SAMPLE_MAGIC:
            raise BadMagic(f"{path} is not a sample file")
        version, flags, n1 = struct.unpack("<III", _read_exact(fh, 12))
        if version != 1:
            raise VersionMismatch(f"unsupported sample version {version}")
        (n2,) = struct.unpack("<I", _read_exact(fh, 4))
        p1 = _read_f32(fh, (n1, 3))
        p2 = _read_f32(fh, (n2, 3))
        gt = FlowField(_read_f32(fh, (n1, 3))) if flags & 1 else None
        mask = None
        if flags & 2:
            mask = np.frombuffer(_read_exact(fh, n1), dtype=np.uint8).astype(bool)
        return SceneSample(PointCloud(p1), PointCloud(p2), gt, mask)


def write_flow(path, flow: FlowField) -> None:
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<I", len(flow)))
        _write_f32(fh, flow.vectors)


def read_flow(path) -> FlowField:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != FLOW_MAGIC:
            raise BadMagic(f"{path} is not a flow file")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        return FlowField(_read_f32(fh, (n, 3)))


# --- model spec (de)serialization -----------------------------------------

def model_spec_to_dict(spec: ModelSpec) -> dict:
    def layer(s: LayerSpec) -> dict:
        return {"kind": s.kind, "radius": s.radius,
                "sample_rate": str(s.sample_rate),
                "mlp_widths": list(s.mlp_widths),
                "neighbor_cap": s.neighbor_cap, "pooling": s.pooling,
                "mixing": s.mixing}
    return {"convs": [layer(s) for s in spec.convs],
            "embed": layer(spec.embed),
            "upconvs": [layer(s) for s in spec.upconvs],
            "share_frame_encoders": spec.share_frame_encoders}


def model_spec_from_dict(d: dict) -> ModelSpec:
    def layer(x: dict) -> LayerSpec:
        return LayerSpec(x["kind"], float(x["radius"]),
                         Fraction(x["sample_rate"]),
                         tuple(int(w) for w in x["mlp_widths"]),
                         int(x["neighbor_cap"]), x["pooling"], x["mixing"])
    return ModelSpec(tuple(layer(x) for x in d["convs"]),
                     layer(d["embed"]),
                     tuple(layer(x) for x in d["upconvs"]),
                     bool(d["share_frame_encoders"]))


def _all_tensors(params: ModelParams):
    """Every tensor including batchnorm running stats, stable order."""
    for name in sorted(params.mlps):
        mlp = params.mlps[name]
        for k, lin in enumerate(mlp.linears):
            yield f"{name}.linear{k}.weight", lin.weight
            yield f"{name}.linear{k}.bias", lin.bias
        for k, bn in enumerate(mlp.batchnorms):
            if bn is not None:
                yield f"{name}.bn{k}.scale", bn.scale
                yield f"{name}.bn{k}.shift", bn.shift
                yield f"{name}.bn{k}.running_mean", bn.running_mean
                yield f"{name}.bn{k}.running_var", bn.running_var


def write_checkpoint(path, spec: ModelSpec, params: ModelParams) -> None:
    spec_json = json.dumps(model_spec_to_dict(spec)).encode("utf-8")
    tensors = list(_all_tensors(params))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<I", len(spec_json)))
        fh.write(spec_json)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            _write_f32(fh, arr)


def read_checkpoint(path) -> Tuple[ModelSpec, ModelParams]:
    """Read and validate a checkpoint; tensor shapes must match the spec."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise BadMagic(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != 1:
            raise VersionMismatch(f"unsupported checkpoint version {version}")
        (spec_len,) = struct.unpack("<I", _read_exact(fh, 4))
        spec = model_spec_from_dict(json.loads(_read_exact(fh, spec_len)))
        params = init_model_params(spec, 0)
        expected = dict(_all_tensors(params))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        if count != len(expected):
            raise ShapeMismatch(
                f"checkpoint holds {count} tensors, spec wants {len(expected)}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            if name not in expected:
                raise ShapeMismatch(f"unexpected tensor {name!r}")
            target = expected[name]
            if tuple(dims) != target.shape:
                raise ShapeMismatch(
                    f"tensor {name!r}: shape {dims} != spec shape {target.shape}")
            target[...] = _read_f32(fh, dims)
        return spec, params
