"""flow3d: learned 3D scene flow between point cloud pairs.

The package couples a hierarchical point-set network (set convolutions, a
flow embedding mixing two frames, and set upconvolutions back to full
resolution) with hand-derived gradients, deterministic training, synthetic
data generation, classical baselines (ICP, RANSAC ground removal), and
applications built on the predicted flow (rigid registration, motion
segmentation).
"""

from .core import (
    Flow3DError,
    FlowField,
    PointCloud,
    RigidTransform,
    SceneSample,
    derive_seed,
    rng_from,
)
from .data import (
    CameraIntrinsics,
    SceneConfig,
    generate_scene,
    read_checkpoint,
    read_flow,
    read_sample,
    rigid_flow,
    unproject_depth,
    write_checkpoint,
    write_flow,
    write_sample,
)
from .inference import ChunkSpec, predict_chunked, predict_resampled
from .layers import LayerSpec
from .metrics import (
    MetricReport,
    acc,
    epe,
    icp,
    metric_report,
    outlier_ratio,
    remove_ground_ransac,
    rigid_fit,
)
from .model import ModelSpec, default_model_spec, forward, init_model_params
from .training import TrainConfig, TrainResult, evaluate_epe, scene_flow_loss, train
from .apps import bench, motion_segment, network_predictor, register_scans

__all__ = [
    "Flow3DError", "FlowField", "PointCloud", "RigidTransform", "SceneSample",
    "derive_seed", "rng_from",
    "CameraIntrinsics", "SceneConfig", "generate_scene", "rigid_flow",
    "unproject_depth", "read_sample", "write_sample", "read_flow",
    "write_flow", "read_checkpoint", "write_checkpoint",
    "ChunkSpec", "predict_resampled", "predict_chunked",
    "LayerSpec", "ModelSpec", "default_model_spec", "forward",
    "init_model_params",
    "MetricReport", "epe", "acc", "outlier_ratio", "metric_report",
    "rigid_fit", "icp", "remove_ground_ransac",
    "TrainConfig", "TrainResult", "train", "scene_flow_loss", "evaluate_epe",
    "network_predictor", "register_scans", "motion_segment", "bench",
]

__version__ = "0.1.0"
