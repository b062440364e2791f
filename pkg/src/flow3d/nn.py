"""Minimal neural kernels with exact hand-derived gradients.

Covers everything the point-set layers need: shared MLPs built from
Linear -> BatchNorm -> ReLU stacks, element-wise max/avg pooling over
variable-size groups, and the huber loss on a residual norm. Forward calls
record a tape of intermediates; backward replays it in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .core import EmptyGroup, ShapeMismatch, rng_from

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class MlpSpec:
    """Widths of the linear layers plus normalization/activation policy.

    Every layer is Linear -> [BatchNorm] -> activation; the final layer's
    activation is `final_activation` (the bare flow-regression layer uses
    "none" with no batchnorm).
    """

    widths: Tuple[int, ...]
    use_batchnorm: bool = True
    final_activation: str = "relu"  # "relu" | "none"

    def __post_init__(self):
        if len(self.widths) == 0 or any(w < 1 for w in self.widths):
            raise ShapeMismatch("widths must be non-empty and >= 1")
        if self.final_activation not in ("relu", "none"):
            raise ShapeMismatch(f"bad final_activation {self.final_activation!r}")


@dataclass
class LinearParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)


@dataclass
class BatchNormParams:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class MlpParams:
    linears: List[LinearParams]
    batchnorms: List[Optional[BatchNormParams]]

    def copy(self) -> "MlpParams":
        return MlpParams(
            [LinearParams(l.weight.copy(), l.bias.copy()) for l in self.linears],
            [None if b is None else BatchNormParams(
                b.scale.copy(), b.shift.copy(),
                b.running_mean.copy(), b.running_var.copy())
             for b in self.batchnorms])


def init_mlp_params(spec: MlpSpec, in_width: int, seed: int) -> MlpParams:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases, unit BN scale."""
    rng = rng_from(seed)
    linears, bns = [], []
    w_in = in_width
    for w_out in spec.widths:
        bound = np.sqrt(6.0 / (w_in + w_out))
        W = rng.uniform(-bound, bound, size=(w_out, w_in))
        linears.append(LinearParams(W, np.zeros(w_out)))
        if spec.use_batchnorm:
            bns.append(BatchNormParams(np.ones(w_out), np.zeros(w_out),
                                       np.zeros(w_out), np.ones(w_out)))
        else:
            bns.append(None)
        w_in = w_out
    return MlpParams(linears, bns)


@dataclass
class _LayerTape:
    x: np.ndarray                 # layer input
    relu_mask: Optional[np.ndarray]
    # batchnorm intermediates (train mode)
    xhat: Optional[np.ndarray] = None
    inv_std: Optional[np.ndarray] = None
    infer_mode: bool = False


@dataclass
class MlpTape:
    spec: MlpSpec
    params: MlpParams
    layers: List[_LayerTape] = field(default_factory=list)


def mlp_forward(spec: MlpSpec, params: MlpParams, inputs: np.ndarray,
                mode: str = "train") -> Tuple[np.ndarray, MlpTape]:
    """Run the MLP on a dense (B, in) matrix.

    Train mode normalizes with batch statistics over the B rows and updates
    running stats by exponential moving average; infer mode applies the
    stored running stats as a per-feature affine map.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.linears[0].weight.shape[1]:
        raise ShapeMismatch(
            f"input {x.shape} does not match first layer "
            f"{params.linears[0].weight.shape}")
    tape = MlpTape(spec, params)
    n_layers = len(spec.widths)
    for k in range(n_layers):
        lin = params.linears[k]
        tape_entry = _LayerTape(x=x, relu_mask=None)
        z = x @ lin.weight.T + lin.bias
        bn = params.batchnorms[k]
        if bn is not None:
            if mode == "train":
                mean = z.mean(axis=0)
                var = z.var(axis=0)
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (z - mean) * inv_std
                z = bn.scale * xhat + bn.shift
                bn.running_mean[:] = BN_MOMENTUM * bn.running_mean + (1 - BN_MOMENTUM) * mean
                bn.running_var[:] = BN_MOMENTUM * bn.running_var + (1 - BN_MOMENTUM) * var
                tape_entry.xhat = xhat
                tape_entry.inv_std = inv_std
            else:
                inv_std = 1.0 / np.sqrt(bn.running_var + BN_EPS)
                xhat = (z - bn.running_mean) * inv_std
                z = bn.scale * xhat + bn.shift
                tape_entry.xhat = xhat
                tape_entry.inv_std = inv_std
                tape_entry.infer_mode = True
        last = k == n_layers - 1
        if not last or spec.final_activation == "relu":
            mask = z > 0
            z = z * mask
            tape_entry.relu_mask = mask
        tape.layers.append(tape_entry)
        x = z
    return x, tape


def zero_grads_like(params: MlpParams) -> MlpParams:
    return MlpParams(
        [LinearParams(np.zeros_like(l.weight), np.zeros_like(l.bias))
         for l in params.linears],
        [None if b is None else BatchNormParams(
            np.zeros_like(b.scale), np.zeros_like(b.shift),
            np.zeros_like(b.running_mean), np.zeros_like(b.running_var))
         for b in params.batchnorms])


def mlp_backward(tape: MlpTape, grad_out: np.ndarray) -> Tuple[np.ndarray, MlpParams]:
    """Exact reverse-mode gradients of mlp_forward.

    Returns (grad wrt the input matrix, grads in the shape of the params).
    Running-stat slots of the gradient structure stay zero.
    """
    g = np.asarray(grad_out, dtype=np.float64)
    grads = zero_grads_like(tape.params)
    for k in range(len(tape.spec.widths) - 1, -1, -1):
        entry = tape.layers[k]
        if entry.relu_mask is not None:
            g = g * entry.relu_mask
        bn = tape.params.batchnorms[k]
        if bn is not None:
            gb = grads.batchnorms[k]
            xhat, inv_std = entry.xhat, entry.inv_std
            gb.scale += (g * xhat).sum(axis=0)
            gb.shift += g.sum(axis=0)
            if entry.infer_mode:  # per-feature affine map
                g = g * bn.scale * inv_std
            else:
                gxhat = g * bn.scale
                B = g.shape[0]
                g = (inv_std / B) * (B * gxhat - gxhat.sum(axis=0)
                                     - xhat * (gxhat * xhat).sum(axis=0))
        lin = tape.params.linears[k]
        grads.linears[k].weight += g.T @ entry.x
        grads.linears[k].bias += g.sum(axis=0)
        g = g @ lin.weight
    return g, grads


# ---------------------------------------------------------------------------
# Set pooling over ragged groups
# ---------------------------------------------------------------------------

@dataclass
class PoolTape:
    mode: str
    offsets: np.ndarray
    n_rows: int
    argmax: Optional[np.ndarray] = None   # (B, c) row indices, max mode
    counts: Optional[np.ndarray] = None   # (B,), avg mode


def set_pool(rows: np.ndarray, offsets: np.ndarray, mode: str = "max"
             ) -> Tuple[np.ndarray, PoolTape]:
    """Element-wise max or mean per group of rows.

    rows[offsets[b]:offsets[b+1]] is group b; every group must be non-empty.
    Max mode records argmax row indices with ties going to the lowest member
    index, which keeps backward deterministic and permutation-stable.
    """
    rows = np.asarray(rows, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.int64)
    B = offsets.shape[0] - 1
    c = rows.shape[1]
    counts = np.diff(offsets)
    if np.any(counts < 1):
        raise EmptyGroup("set_pool requires non-empty groups")
    out = np.empty((B, c))
    if mode == "max":
        argmax = np.empty((B, c), dtype=np.int64)
        for b in range(B):
            s, e = offsets[b], offsets[b + 1]
            block = rows[s:e]
            am = np.argmax(block, axis=0)
            argmax[b] = s + am
            out[b] = block[am, np.arange(c)]
        return out, PoolTape("max", offsets, rows.shape[0], argmax=argmax)
    elif mode == "avg":
        np.add.reduceat(rows, offsets[:-1], axis=0, out=out)
        out /= counts[:, None]
        return out, PoolTape("avg", offsets, rows.shape[0], counts=counts)
    raise ShapeMismatch(f"unknown pool mode {mode!r}")


def set_pool_backward(tape: PoolTape, grad_out: np.ndarray) -> np.ndarray:
    g = np.asarray(grad_out, dtype=np.float64)
    B, c = g.shape
    grad_rows = np.zeros((tape.n_rows, c))
    if tape.mode == "max":
        cols = np.broadcast_to(np.arange(c), (B, c))
        np.add.at(grad_rows, (tape.argmax.ravel(), cols.ravel()), g.ravel())
    else:
        scaled = g / tape.counts[:, None]
        group_of_row = np.repeat(np.arange(B), tape.counts)
        grad_rows += scaled[group_of_row]
    return grad_rows


# ---------------------------------------------------------------------------
# Losses on 3-vector residuals
# ---------------------------------------------------------------------------

def huber(residual: np.ndarray, delta: float = 1.0) -> Tuple[float, np.ndarray]:
    """Huber loss on the residual norm: quadratic inside delta, linear outside.

    Returns (loss, gradient wrt the residual vector); gradient is the zero
    vector at a zero residual.
    """
    r = np.asarray(residual, dtype=np.float64)
    rho = float(np.linalg.norm(r))
    if rho <= delta:
        return 0.5 * rho * rho, r.copy()
    return delta * (rho - 0.5 * delta), delta * r / rho


def residual_loss(residuals: np.ndarray, variant: str = "huber_norm",
                  delta: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized per-row loss and gradient for a (N, 3) residual array.

    Variants: huber_norm (default), l2_norm (plain norm), per_coord_smooth_l1
    (scalar huber summed over coordinates).
    """
    r = np.asarray(residuals, dtype=np.float64)
    if variant == "huber_norm":
        rho = np.linalg.norm(r, axis=1)
        quad = rho <= delta
        loss = np.where(quad, 0.5 * rho * rho, delta * (rho - 0.5 * delta))
        safe = np.maximum(rho, 1e-300)
        grad = np.where(quad[:, None], r, delta * r / safe[:, None])
        return loss, grad
    if variant == "l2_norm":
        rho = np.linalg.norm(r, axis=1)
        safe = np.maximum(rho, 1e-300)
        grad = np.where(rho[:, None] > 0, r / safe[:, None], 0.0)
        return rho, grad
    if variant == "per_coord_smooth_l1":
        a = np.abs(r)
        quad = a <= delta
        loss = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta)).sum(axis=1)
        grad = np.where(quad, r, delta * np.sign(r))
        return loss, grad
    raise ShapeMismatch(f"unknown loss variant {variant!r}")
