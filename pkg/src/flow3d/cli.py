"""Command-line surface.

Subcommands: gen, train, infer, eval, icp, register, segment, ground,
bench. Every command accepts --seed and --config (flat JSON whose keys are
the typed config field names). Exit codes: 0 success, 1 usage error, 2 data
error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import data as dio
from . import report
from .apps import bench, motion_segment, network_predictor, register_scans
from .core import Flow3DError, FlowField, NoGroundTruth, derive_seed
from .data import SceneConfig, generate_scene
from .inference import ChunkSpec, predict_chunked, predict_resampled
from .metrics import icp as run_icp
from .metrics import metric_report, remove_ground_ransac
from .model import default_model_spec
from .training import TrainConfig, train


def _load_config(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _fill(cls, cfg: dict, **overrides):
    """Build a dataclass from the matching keys of a flat config dict."""
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in cfg.items():
        if k in names:
            f = next(f for f in dataclasses.fields(cls) if f.name == k)
            if isinstance(v, list):
                v = tuple(v)
            kwargs[k] = v
    kwargs.update(overrides)
    return cls(**kwargs)


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, default=None,
                   help="flat JSON overriding typed-config fields")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flow3d",
                                 description="Scene flow estimation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic samples")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)

    p = sub.add_parser("train", help="train a model on a sample directory")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, default=None, help="metrics log path")
    p.add_argument("--width-scale", type=float, default=0.5)
    p.add_argument("--plot", action="store_true",
                   help="also render training curves next to the log")
    _add_common(p)

    p = sub.add_parser("infer", help="predict flow for a sample file")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sample", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="flow output (FN3F)")
    p.add_argument("--resamples", type=int, default=10)
    p.add_argument("--chunked", action="store_true")
    p.add_argument("--plot", action="store_true",
                   help="emit quiver text and figure next to the flow file")
    _add_common(p)

    p = sub.add_parser("eval", help="score a prediction against ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--sample", type=Path, required=True)
    _add_common(p)

    p = sub.add_parser("icp", help="global ICP baseline flow for a sample")
    p.add_argument("--sample", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="flow output (FN3F)")
    _add_common(p)

    p = sub.add_parser("register", help="rigid registration via predicted flow")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sample", type=Path, required=True)
    p.add_argument("--passes", type=int, default=2)
    _add_common(p)

    p = sub.add_parser("segment", help="motion segmentation from a flow file")
    p.add_argument("--sample", type=Path, required=True)
    p.add_argument("--flow", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="cluster id text file")
    p.add_argument("--plot", action="store_true")
    _add_common(p)

    p = sub.add_parser("ground", help="RANSAC ground removal mask")
    p.add_argument("--sample", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="mask text file")
    _add_common(p)

    p = sub.add_parser("bench", help="forward-pass runtime table")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--sizes", type=str, default="256x1,512x1,1024x1",
                   help="comma list of NxB entries")
    _add_common(p)
    return ap


def _cmd_gen(args, cfg):
    scene_cfg = _fill(SceneConfig, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        sample = generate_scene(scene_cfg, derive_seed(args.seed, i))
        dio.write_sample(args.out / f"sample_{i:05d}.fn3d", sample)
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def _load_dataset(path: Path):
    files = sorted(path.glob("*.fn3d"))
    return [dio.read_sample(f) for f in files]


def _cmd_train(args, cfg):
    dataset = _load_dataset(args.data)
    train_cfg = _fill(TrainConfig, cfg, seed=args.seed)
    spec = default_model_spec(width_scale=args.width_scale,
                              pooling=cfg.get("pooling", "max"),
                              mixing=cfg.get("mixing", "learned"))
    result = train(spec, dataset, train_cfg,
                   checkpoint_path=str(args.out),
                   log_path=str(args.log) if args.log else None)
    print(f"final held-out EPE: {result.eval_epe_per_epoch[-1]:.6g}")
    if args.plot and args.log:
        report.plot_training_curves(args.log.with_suffix(".png"),
                                    result.log_lines, result.eval_epe_per_epoch)
    return 0


def _cmd_infer(args, cfg):
    spec, params = dio.read_checkpoint(args.checkpoint)
    sample = dio.read_sample(args.sample)
    if args.chunked:
        chunk = _fill(ChunkSpec, cfg)
        flow, _ = predict_chunked(spec, params, sample.frame1, sample.frame2,
                                  chunk, args.resamples, args.seed)
    else:
        flow, _ = predict_resampled(spec, params, sample.frame1, sample.frame2,
                                    args.resamples, args.seed)
    dio.write_flow(args.out, flow)
    if args.plot:
        report.write_quiver_text(args.out.with_suffix(".quiver.txt"),
                                 sample.frame1, flow)
        report.plot_flow_quiver(args.out.with_suffix(".png"),
                                sample.frame1, flow)
    print(f"wrote flow for {len(flow)} points to {args.out}")
    return 0


def _cmd_eval(args, cfg):
    pred = dio.read_flow(args.pred)
    sample = dio.read_sample(args.sample)
    if sample.gt_flow is None:
        raise NoGroundTruth("sample has no ground-truth flow")
    rep = metric_report(pred, sample.gt_flow, sample.mask)
    for line in rep.lines():
        print(line)
    return 0


def _cmd_icp(args, cfg):
    sample = dio.read_sample(args.sample)
    transform, flow = run_icp(sample.frame1, sample.frame2)
    if args.out:
        dio.write_flow(args.out, flow)
    angle = transform.angle()
    t = transform.translation
    print(f"rotation_angle={angle:.6g}")
    print(f"translation={t[0]:.6g},{t[1]:.6g},{t[2]:.6g}")
    return 0


def _cmd_register(args, cfg):
    spec, params = dio.read_checkpoint(args.checkpoint)
    sample = dio.read_sample(args.sample)
    predict = network_predictor(spec, params, runs=cfg.get("resamples", 1))
    transform, _, _ = register_scans(predict, sample.frame1, sample.frame2,
                                     args.passes, args.seed)
    t = transform.translation
    print(f"rotation_angle={transform.angle():.6g}")
    print(f"translation={t[0]:.6g},{t[1]:.6g},{t[2]:.6g}")
    return 0


def _cmd_segment(args, cfg):
    sample = dio.read_sample(args.sample)
    flow = dio.read_flow(args.flow)
    result = motion_segment(sample.frame1, flow,
                            lam=cfg.get("lam", 3.0),
                            eps=cfg.get("eps", 0.3),
                            min_cluster_size=cfg.get("min_cluster_size", 30))
    if args.out:
        np.savetxt(args.out, result.labels, fmt="%d")
    if args.plot and args.out:
        report.plot_segmentation(Path(args.out).with_suffix(".png"),
                                 sample.frame1, result.labels)
    print(f"clusters={result.cluster_count}")
    return 0


def _cmd_ground(args, cfg):
    sample = dio.read_sample(args.sample)
    mask, plane = remove_ground_ransac(sample.frame1,
                                       iters=cfg.get("iters", 200),
                                       inlier_dist=cfg.get("inlier_dist", 0.05),
                                       seed=args.seed)
    if args.out:
        np.savetxt(args.out, mask.astype(int), fmt="%d")
    print(f"ground_points={int(mask.sum())}")
    print(f"plane={plane[0]:.6g},{plane[1]:.6g},{plane[2]:.6g},{plane[3]:.6g}")
    return 0


def _cmd_bench(args, cfg):
    if args.checkpoint:
        spec, params = dio.read_checkpoint(args.checkpoint)
    else:
        from .model import init_model_params
        spec = default_model_spec(width_scale=cfg.get("width_scale", 0.25))
        params = init_model_params(spec, args.seed)
    sizes = []
    for part in args.sizes.split(","):
        n, b = part.lower().split("x")
        sizes.append((int(n), int(b)))
    rows = bench(spec, params, sizes, seed=args.seed)
    print(f"{'points':>8} {'batch':>6} {'ms':>10}")
    for r in rows:
        print(f"{r.points:>8} {r.batch:>6} {r.median_ms:>10.2f}")
    return 0


_COMMANDS = {
    "gen": _cmd_gen, "train": _cmd_train, "infer": _cmd_infer,
    "eval": _cmd_eval, "icp": _cmd_icp, "register": _cmd_register,
    "segment": _cmd_segment, "ground": _cmd_ground, "bench": _cmd_bench,
}


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        cfg = _load_config(args.config)
        return _COMMANDS[args.command](args, cfg)
    except Flow3DError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
