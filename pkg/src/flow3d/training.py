"""Supervised training: flow loss with cycle-consistency, Adam, minibatch loop.

The loss for a sample (P, Q, gt, mask) is the mean over supervised points of

    loss(d_i - d*_i) + lambda * loss(d'_i + d_i)

where d' is the backward flow predicted from the shifted cloud P + D back to
P. Supervised points are those with mask True and not isolated in either
pass. Gradients flow through both passes, including D's appearance inside
the shifted cloud (disable with stop_cycle_gradient).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import (AllPointsMasked, EmptyDataset, FlowField, NoGroundTruth,
                   PointCloud, SceneSample, derive_seed, rng_from)
from .model import (ModelParams, ModelSpec, backward, forward,
                    params_to_vector, vector_to_params)
from .nn import residual_loss


@dataclass(frozen=True)
class TrainConfig:
    lambda_cycle: float = 0.3
    use_cycle: bool = True
    stop_cycle_gradient: bool = False
    loss_variant: str = "huber_norm"
    huber_delta: float = 1.0
    lr: float = 1e-3
    lr_decay: float = 0.7          # multiplied in every lr_decay_epochs
    lr_decay_epochs: int = 10
    optimizer: str = "adam"        # "adam" | "sgd_momentum"
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0
    checkpoint_every: int = 0      # steps; 0 disables


# spacing between scenes of a merged minibatch; far beyond every layer
# radius, so neighborhoods and samples never cross scene boundaries
BATCH_OFFSET = 100.0


def merge_batch(samples: Sequence[SceneSample]) -> SceneSample:
    """Concatenate scene pairs into one joint sample for a shared forward.

    Each pair is placed at a distant offset along x. The model is
    translation-equivariant and every receptive field is far smaller than
    the spacing, so per-scene geometry is unaffected -- but batch-norm
    statistics are computed across the whole minibatch, the way multi-scene
    batches behave. Flow vectors are unchanged (both frames shift equally).
    """
    f1, f2, gt, mask = [], [], [], []
    for k, s in enumerate(samples):
        if s.gt_flow is None:
            raise NoGroundTruth("sample has no ground-truth flow")
        off = np.array([k * BATCH_OFFSET, 0.0, 0.0])
        f1.append(s.frame1.positions + off)
        f2.append(s.frame2.positions + off)
        gt.append(s.gt_flow.vectors)
        mask.append(s.supervision_mask())
    return SceneSample(PointCloud(np.concatenate(f1)),
                       PointCloud(np.concatenate(f2)),
                       FlowField(np.concatenate(gt)),
                       np.concatenate(mask))


def scene_flow_loss(spec: ModelSpec, params: ModelParams, sample: SceneSample,
                    cfg: TrainConfig, seed: int
                    ) -> Tuple[float, ModelParams, dict]:
    """Loss value, parameter gradients, and per-sample diagnostics."""
    if sample.gt_flow is None:
        raise NoGroundTruth("sample has no ground-truth flow")
    flow, tape1, iso1 = forward(spec, params, sample.frame1, sample.frame2,
                                "train", derive_seed(seed, 1))
    D = flow.vectors
    gt = sample.gt_flow.vectors
    sup = sample.supervision_mask() & ~iso1

    if not sup.any():
        raise AllPointsMasked("no supervised points remain")

    cycle_parts = None
    if cfg.use_cycle:
        # the backward pass stays finite even for points the shifted cloud
        # isolates (their embedding is zero), so the supervised set does not
        # depend on it
        shifted = PointCloud(sample.frame1.positions + D)
        back_flow, tape2, _ = forward(spec, params, shifted, sample.frame1,
                                      "train", derive_seed(seed, 2))
        cycle_parts = (back_flow.vectors, tape2)

    n_sup = int(sup.sum())

    r1 = D[sup] - gt[sup]
    l1, g1 = residual_loss(r1, cfg.loss_variant, cfg.huber_delta)
    loss = float(l1.mean())
    gD = np.zeros_like(D)
    gD[sup] = g1 / n_sup

    total = None
    if cycle_parts is not None:
        Dp, tape2 = cycle_parts
        r2 = Dp[sup] + D[sup]
        l2, g2 = residual_loss(r2, cfg.loss_variant, cfg.huber_delta)
        loss += cfg.lambda_cycle * float(l2.mean())
        gDp = np.zeros_like(Dp)
        gDp[sup] = cfg.lambda_cycle * g2 / n_sup
        gD[sup] += cfg.lambda_cycle * g2 / n_sup
        res2 = backward(tape2, gDp,
                        want_input_grads=not cfg.stop_cycle_gradient)
        total = res2.params
        if not cfg.stop_cycle_gradient:
            gD += res2.frame1_positions  # shifted cloud positions = P + D

    res1 = backward(tape1, gD)
    if total is None:
        total = res1.params
    else:
        _add_params(total, res1.params)

    epe = float(np.linalg.norm(D[sup] - gt[sup], axis=1).mean())
    return loss, total, {"epe": epe, "n_supervised": n_sup}


def _add_params(dst: ModelParams, src: ModelParams) -> None:
    for name, mlp in src.mlps.items():
        d = dst.mlps[name]
        for a, b in zip(d.linears, mlp.linears):
            a.weight += b.weight
            a.bias += b.bias
        for a, b in zip(d.batchnorms, mlp.batchnorms):
            if a is not None:
                a.scale += b.scale
                a.shift += b.shift


class _Optimizer:
    def __init__(self, cfg: TrainConfig, size: int):
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer == "adam":
            self.m = np.zeros(size)
            self.v = np.zeros(size)
        elif cfg.optimizer == "sgd_momentum":
            self.vel = np.zeros(size)
        else:
            raise ValueError(f"unknown optimizer {cfg.optimizer!r}")

    def step(self, vec: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        cfg = self.cfg
        self.t += 1
        if cfg.optimizer == "adam":
            self.m = cfg.adam_beta1 * self.m + (1 - cfg.adam_beta1) * grad
            self.v = cfg.adam_beta2 * self.v + (1 - cfg.adam_beta2) * grad * grad
            mhat = self.m / (1 - cfg.adam_beta1 ** self.t)
            vhat = self.v / (1 - cfg.adam_beta2 ** self.t)
            return vec - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        self.vel = cfg.momentum * self.vel - lr * grad
        return vec + self.vel


@dataclass
class TrainResult:
    params: ModelParams
    log_lines: List[str] = field(default_factory=list)
    eval_epe_per_epoch: List[float] = field(default_factory=list)


def evaluate_epe(spec: ModelSpec, params: ModelParams,
                 samples: Sequence[SceneSample], seed: int = 0) -> float:
    """Mean supervised EPE over samples, one infer-mode forward pass each."""
    total, count = 0.0, 0
    for i, s in enumerate(samples):
        flow, _, iso = forward(spec, params, s.frame1, s.frame2, "infer",
                               derive_seed(seed, 7000 + i))
        sup = s.supervision_mask() & ~iso
        if sup.any():
            err = np.linalg.norm(flow.vectors[sup] - s.gt_flow.vectors[sup], axis=1)
            total += float(err.sum())
            count += int(sup.sum())
    return total / max(count, 1)


def train(spec: ModelSpec, dataset: Sequence[SceneSample], cfg: TrainConfig,
          eval_dataset: Optional[Sequence[SceneSample]] = None,
          init_params: Optional[ModelParams] = None,
          checkpoint_path: Optional[str] = None,
          log_path: Optional[str] = None) -> TrainResult:
    """Minibatch training, fully deterministic given cfg.seed.

    Logs one `step loss epe lr` line per optimizer step (epe is the batch
    training EPE); per-epoch held-out EPE is collected in the result. When
    eval_dataset is omitted, 10% of the dataset (at least one sample, still
    kept in training at size < 5) is held out.
    """
    from .model import init_model_params
    from . import data as _data

    if len(dataset) == 0:
        raise EmptyDataset("training dataset is empty")
    dataset = list(dataset)
    if eval_dataset is None:
        if len(dataset) >= 5:
            n_hold = max(1, len(dataset) // 10)
            eval_dataset = dataset[-n_hold:]
            dataset = dataset[:-n_hold]
        else:
            eval_dataset = dataset

    params = (init_params or init_model_params(spec, derive_seed(cfg.seed, 0))).copy()
    vec = params_to_vector(params)
    opt = _Optimizer(cfg, vec.size)
    result = TrainResult(params)
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr * (cfg.lr_decay ** (epoch // cfg.lr_decay_epochs))
        order = rng_from(derive_seed(cfg.seed, 1, epoch)).permutation(len(dataset))
        for start in range(0, len(dataset), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            merged = merge_batch([dataset[si] for si in batch])
            try:
                loss, grads, aux = scene_flow_loss(
                    spec, params, merged, cfg,
                    derive_seed(cfg.seed, 2, step))
            except AllPointsMasked:
                # every point masked or isolated across the whole batch
                continue
            grad = params_to_vector(grads)
            gnorm = float(np.linalg.norm(grad))
            if cfg.grad_clip > 0 and gnorm > cfg.grad_clip:
                grad = grad * (cfg.grad_clip / gnorm)
            vec = opt.step(vec, grad, lr)
            params = vector_to_params(vec, params)
            step += 1
            result.log_lines.append(
                f"{step} {loss:.6g} {aux['epe']:.6g} {lr:.6g}")
            if checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                _data.write_checkpoint(checkpoint_path, spec, params)
        result.eval_epe_per_epoch.append(
            evaluate_epe(spec, params, eval_dataset, derive_seed(cfg.seed, 3, epoch)))
    result.params = params
    if checkpoint_path:
        _data.write_checkpoint(checkpoint_path, spec, params)
    if log_path:
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(result.log_lines) + "\n")
    return result
