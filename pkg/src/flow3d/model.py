"""End-to-end scene flow network: 4 set conv + flow embedding + 4 set upconv
+ a final bare linear regression, with skip connections and (by default)
shared frame encoders.

Layer stack (radius, sample rate, widths) defaults to:

    set conv        0.5   x1/2   [32, 32, 64]
    set conv        1.0   x1/4   [64, 64, 128]
    flow embedding  5.0   x1     [128, 128, 128]
    set conv        2.0   x1/4   [128, 128, 256]
    set conv        4.0   x1/4   [256, 256, 512]
    set upconv      4.0   x4     [128, 128, 256]
    set upconv      2.0   x4     [128, 128, 256]
    set upconv      1.0   x4     [128, 128, 128]
    set upconv      0.5   x2     [128, 128, 128]
    linear          -> 3

backward() optionally produces gradients with respect to both frames' input
positions, which the cycle-consistency loss needs to differentiate through
the shifted cloud fed to its second pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Optional, Tuple

import numpy as np

from .core import FlowField, PointCloud, derive_seed, validate_cloud
from .layers import (LayerSpec, SetConvTape, SetUpconvTape, FlowEmbeddingTape,
                     flow_embedding_backward, flow_embedding_forward,
                     set_conv_backward, set_conv_forward,
                     set_upconv_backward, set_upconv_forward)
from .nn import (MlpParams, MlpSpec, MlpTape, init_mlp_params, mlp_backward,
                 mlp_forward, zero_grads_like)


@dataclass(frozen=True)
class ModelSpec:
    convs: Tuple[LayerSpec, LayerSpec, LayerSpec, LayerSpec]
    embed: LayerSpec
    upconvs: Tuple[LayerSpec, LayerSpec, LayerSpec, LayerSpec]
    share_frame_encoders: bool = True

    def layer_rows(self):
        """Layers in table order: conv1, conv2, embed, conv3, conv4, up1..4."""
        return (self.convs[0], self.convs[1], self.embed,
                self.convs[2], self.convs[3], *self.upconvs)


def default_model_spec(width_scale: float = 1.0, pooling: str = "max",
                       mixing: str = "learned",
                       share_frame_encoders: bool = True) -> ModelSpec:
    """The standard architecture, optionally with all MLP widths scaled."""
    def w(widths):
        return tuple(max(1, round(x * width_scale)) for x in widths)

    convs = (
        LayerSpec("set_conv", 0.5, Fraction(1, 2), w((32, 32, 64)), pooling=pooling),
        LayerSpec("set_conv", 1.0, Fraction(1, 4), w((64, 64, 128)), pooling=pooling),
        LayerSpec("set_conv", 2.0, Fraction(1, 4), w((128, 128, 256)), pooling=pooling),
        LayerSpec("set_conv", 4.0, Fraction(1, 4), w((256, 256, 512)), pooling=pooling),
    )
    embed = LayerSpec("flow_embedding", 5.0, Fraction(1), w((128, 128, 128)),
                      neighbor_cap=64, pooling=pooling, mixing=mixing)
    upconvs = (
        LayerSpec("set_upconv", 4.0, Fraction(4), w((128, 128, 256)), pooling=pooling),
        LayerSpec("set_upconv", 2.0, Fraction(4), w((128, 128, 256)), pooling=pooling),
        LayerSpec("set_upconv", 1.0, Fraction(4), w((128, 128, 128)), pooling=pooling),
        LayerSpec("set_upconv", 0.5, Fraction(2), w((128, 128, 128)), pooling=pooling),
    )
    return ModelSpec(convs, embed, upconvs, share_frame_encoders)


REGRESS_OUT = 3


def _mlp_input_widths(spec: ModelSpec) -> Dict[str, int]:
    c1, c2, c3, c4 = (s.mlp_widths[-1] for s in spec.convs)
    e = spec.embed.mlp_widths[-1]
    u1, u2, u3, u4 = (s.mlp_widths[-1] for s in spec.upconvs)
    widths = {
        "conv1": 0 + 3,
        "conv2": c1 + 3,
        "embed": spec.embed.mlp_input_width(c2, c2),
        "conv3": e + 3,
        "conv4": c3 + 3,
        "upconv1": c4 + 3,
        "upconv2": (u1 + c3) + 3,
        "upconv3": (u2 + c2) + 3,
        "upconv4": (u3 + c1) + 3,
        "regress": u4,
    }
    if not spec.share_frame_encoders:
        widths["conv1_b"] = widths["conv1"]
        widths["conv2_b"] = widths["conv2"]
    return widths


def _mlp_spec_for(spec: ModelSpec, name: str) -> MlpSpec:
    if name == "regress":
        return MlpSpec((REGRESS_OUT,), use_batchnorm=False, final_activation="none")
    table = {"conv1": spec.convs[0], "conv2": spec.convs[1],
             "conv1_b": spec.convs[0], "conv2_b": spec.convs[1],
             "embed": spec.embed, "conv3": spec.convs[2], "conv4": spec.convs[3],
             "upconv1": spec.upconvs[0], "upconv2": spec.upconvs[1],
             "upconv3": spec.upconvs[2], "upconv4": spec.upconvs[3]}
    return table[name].mlp_spec()


@dataclass
class ModelParams:
    """All trainable tensors, keyed by layer name."""

    mlps: Dict[str, MlpParams]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.mlps.items()})


def init_model_params(spec: ModelSpec, seed: int) -> ModelParams:
    widths = _mlp_input_widths(spec)
    mlps = {}
    for i, (name, w_in) in enumerate(sorted(widths.items())):
        mlps[name] = init_mlp_params(_mlp_spec_for(spec, name), w_in,
                                     derive_seed(seed, 100 + i))
    return ModelParams(mlps)


def zero_model_grads(params: ModelParams) -> ModelParams:
    return ModelParams({k: zero_grads_like(v) for k, v in params.mlps.items()})


def trainable_arrays(params: ModelParams):
    """Yield (name, array) for every trainable tensor, in a stable order."""
    for name in sorted(params.mlps):
        mlp = params.mlps[name]
        for k, lin in enumerate(mlp.linears):
            yield f"{name}.linear{k}.weight", lin.weight
            yield f"{name}.linear{k}.bias", lin.bias
        for k, bn in enumerate(mlp.batchnorms):
            if bn is not None:
                yield f"{name}.bn{k}.scale", bn.scale
                yield f"{name}.bn{k}.shift", bn.shift


def params_to_vector(params: ModelParams) -> np.ndarray:
    return np.concatenate([a.ravel() for _, a in trainable_arrays(params)])


def vector_to_params(vec: np.ndarray, template: ModelParams) -> ModelParams:
    out = template.copy()
    pos = 0
    for _, a in trainable_arrays(out):
        a[...] = vec[pos:pos + a.size].reshape(a.shape)
        pos += a.size
    if pos != vec.size:
        raise ValueError(f"vector length {vec.size} != parameter count {pos}")
    return out


@dataclass
class ModelTape:
    spec: ModelSpec
    n1: int
    n2: int
    f1_conv1: SetConvTape = None
    f1_conv2: SetConvTape = None
    f2_conv1: SetConvTape = None
    f2_conv2: SetConvTape = None
    embed: FlowEmbeddingTape = None
    conv3: SetConvTape = None
    conv4: SetConvTape = None
    upconvs: list = field(default_factory=list)
    regress: MlpTape = None


def _enc_names(spec: ModelSpec) -> Tuple[str, str]:
    if spec.share_frame_encoders:
        return "conv1", "conv2"
    return "conv1_b", "conv2_b"


def forward(spec: ModelSpec, params: ModelParams, frame1: PointCloud,
            frame2: PointCloud, mode: str = "train", seed: int = 0
            ) -> Tuple[FlowField, ModelTape, np.ndarray]:
    """Predict per-point flow for frame1.

    Returns (flow over frame1, tape, isolation mask over frame1). A point is
    flagged isolated when its value derives entirely from empty neighborhoods
    (no frame-2 support in the flow embedding, propagated through the
    refinement stages).
    """
    validate_cloud(frame1)
    validate_cloud(frame2)
    P, Q = frame1.positions, frame2.positions
    tape = ModelTape(spec, P.shape[0], Q.shape[0])
    m = params.mlps

    c1_pos, c1_feat, tape.f1_conv1 = set_conv_forward(
        spec.convs[0], m["conv1"], P, None, derive_seed(seed, 1), mode)
    c2_pos, c2_feat, tape.f1_conv2 = set_conv_forward(
        spec.convs[1], m["conv2"], c1_pos, c1_feat, derive_seed(seed, 2), mode)

    n1b, n2b = _enc_names(spec)
    q1_pos, q1_feat, tape.f2_conv1 = set_conv_forward(
        spec.convs[0], m[n1b], Q, None, derive_seed(seed, 3), mode)
    q2_pos, q2_feat, tape.f2_conv2 = set_conv_forward(
        spec.convs[1], m[n2b], q1_pos, q1_feat, derive_seed(seed, 4), mode)

    emb, iso_embed, tape.embed = flow_embedding_forward(
        spec.embed, m["embed"], c2_pos, c2_feat, q2_pos, q2_feat,
        derive_seed(seed, 5), mode)

    c3_pos, c3_feat, tape.conv3 = set_conv_forward(
        spec.convs[2], m["conv3"], c2_pos, emb, derive_seed(seed, 6), mode)
    c4_pos, c4_feat, tape.conv4 = set_conv_forward(
        spec.convs[3], m["conv4"], c3_pos, c3_feat, derive_seed(seed, 7), mode)

    # Isolation propagation: a coarse point is isolated when every capped
    # neighbor feeding it is isolated (or it has no neighbors at all).
    iso3 = _propagate_iso_conv(tape.conv3, iso_embed)
    iso4 = _propagate_iso_conv(tape.conv4, iso3)

    u1, iso_u1, t_u1 = set_upconv_forward(
        spec.upconvs[0], m["upconv1"], c4_pos, c4_feat, c3_pos, c3_feat,
        derive_seed(seed, 8), mode)
    u2, iso_u2, t_u2 = set_upconv_forward(
        spec.upconvs[1], m["upconv2"], c3_pos, u1, c2_pos, c2_feat,
        derive_seed(seed, 9), mode)
    u3, iso_u3, t_u3 = set_upconv_forward(
        spec.upconvs[2], m["upconv3"], c2_pos, u2, c1_pos, c1_feat,
        derive_seed(seed, 10), mode)
    u4, iso_u4, t_u4 = set_upconv_forward(
        spec.upconvs[3], m["upconv4"], c1_pos, u3, P, None,
        derive_seed(seed, 11), mode)
    tape.upconvs = [t_u1, t_u2, t_u3, t_u4]

    iso_c3u = _propagate_iso_up(t_u1, iso4, iso_u1)
    iso_c2u = _propagate_iso_up(t_u2, iso_c3u, iso_u2)
    iso_c1u = _propagate_iso_up(t_u3, iso_c2u, iso_u3)
    iso_out = _propagate_iso_up(t_u4, iso_c1u, iso_u4)

    flow_vec, tape.regress = mlp_forward(
        _mlp_spec_for(spec, "regress"), m["regress"], u4, mode)
    return FlowField(flow_vec), tape, iso_out


def _propagate_iso_conv(tape: SetConvTape, src_iso: np.ndarray) -> np.ndarray:
    g = tape.group
    iso_rows = src_iso[g.neighbors.indices]
    m = len(tape.center_idx)
    out = np.ones(m, dtype=bool)
    any_live = np.zeros(m, dtype=bool)
    np.logical_or.at(any_live, g.group_of_row, ~iso_rows)
    out[any_live] = False
    return out


def _propagate_iso_up(tape: SetUpconvTape, src_iso: np.ndarray,
                      empty_iso: np.ndarray) -> np.ndarray:
    g = tape.group
    out = empty_iso.copy()
    if g.neighbors.indices.shape[0]:
        any_live = np.zeros(tape.n_targets, dtype=bool)
        np.logical_or.at(any_live, g.group_of_row,
                         ~src_iso[g.neighbors.indices])
        out |= ~any_live
    return out


@dataclass
class ModelGrads:
    params: ModelParams
    frame1_positions: Optional[np.ndarray] = None
    frame2_positions: Optional[np.ndarray] = None


def _acc(dst: MlpParams, src: MlpParams) -> None:
    for a, b in zip(dst.linears, src.linears):
        a.weight += b.weight
        a.bias += b.bias
    for a, b in zip(dst.batchnorms, src.batchnorms):
        if a is not None:
            a.scale += b.scale
            a.shift += b.shift


def backward(tape: ModelTape, grad_flow: np.ndarray,
             want_input_grads: bool = False) -> ModelGrads:
    """Exact gradients of forward() wrt every parameter tensor.

    With want_input_grads, also accumulates gradients on both frames' input
    positions (through every relative-offset term; the discrete sampling and
    grouping choices are treated as fixed).
    """
    spec = tape.spec
    grads = zero_model_grads(ModelParams(
        {name: t for name, t in _tapes_params(tape).items()}))
    g_u4, g_regress = mlp_backward(tape.regress, np.asarray(grad_flow, dtype=np.float64))
    _acc(grads.mlps["regress"], g_regress)

    gP = np.zeros((tape.n1, 3))
    g_c1_pos = np.zeros((len(tape.f1_conv1.center_idx), 3))
    g_c2_pos = np.zeros((len(tape.f1_conv2.center_idx), 3))
    g_c3_pos = np.zeros((len(tape.conv3.center_idx), 3))
    g_c4_pos = np.zeros((len(tape.conv4.center_idx), 3))

    t_u1, t_u2, t_u3, t_u4 = tape.upconvs
    g_u3, gsp, gtg, _, gp = set_upconv_backward(t_u4, g_u4)
    _acc(grads.mlps["upconv4"], gp)
    g_c1_pos += gsp
    gP += gtg

    g_u2, gsp, gtg, g_c1_feat, gp = set_upconv_backward(t_u3, g_u3)
    _acc(grads.mlps["upconv3"], gp)
    g_c2_pos += gsp
    g_c1_pos += gtg

    g_u1, gsp, gtg, g_c2_feat, gp = set_upconv_backward(t_u2, g_u2)
    _acc(grads.mlps["upconv2"], gp)
    g_c3_pos += gsp
    g_c2_pos += gtg

    g_c4_feat, gsp, gtg, g_c3_feat, gp = set_upconv_backward(t_u1, g_u1)
    _acc(grads.mlps["upconv1"], gp)
    g_c4_pos += gsp
    g_c3_pos += gtg

    gf, gpos, gp = set_conv_backward(tape.conv4, g_c4_feat, g_c4_pos)
    _acc(grads.mlps["conv4"], gp)
    g_c3_feat = g_c3_feat + gf
    g_c3_pos += gpos

    g_emb, gpos, gp = set_conv_backward(tape.conv3, g_c3_feat, g_c3_pos)
    _acc(grads.mlps["conv3"], gp)
    g_c2_pos += gpos

    gf1, gf2, gp1, gp2, gp = flow_embedding_backward(tape.embed, g_emb)
    _acc(grads.mlps["embed"], gp)
    g_c2_feat = g_c2_feat + gf1
    g_c2_pos += gp1

    gf, gpos, gp = set_conv_backward(tape.f1_conv2, g_c2_feat, g_c2_pos)
    _acc(grads.mlps["conv2"], gp)
    g_c1_feat = g_c1_feat + gf
    g_c1_pos += gpos

    _, gpos, gp = set_conv_backward(tape.f1_conv1, g_c1_feat, g_c1_pos)
    _acc(grads.mlps["conv1"], gp)
    gP += gpos

    # frame-2 encoder chain
    n1b, n2b = _enc_names(spec)
    gf_q1, g_q1_pos, gp = set_conv_backward(tape.f2_conv2, gf2, gp2)
    _acc(grads.mlps[n2b], gp)
    _, gQ, gp = set_conv_backward(tape.f2_conv1, gf_q1, g_q1_pos)
    _acc(grads.mlps[n1b], gp)

    return ModelGrads(grads,
                      gP if want_input_grads else None,
                      gQ if want_input_grads else None)


def _tapes_params(tape: ModelTape) -> Dict[str, MlpParams]:
    spec = tape.spec
    n1b, n2b = _enc_names(spec)
    out = {
        "conv1": tape.f1_conv1.group.mlp_tape.params,
        "conv2": tape.f1_conv2.group.mlp_tape.params,
        "embed": tape.embed.group.mlp_tape.params,
        "conv3": tape.conv3.group.mlp_tape.params,
        "conv4": tape.conv4.group.mlp_tape.params,
        "upconv1": tape.upconvs[0].group.mlp_tape.params,
        "upconv2": tape.upconvs[1].group.mlp_tape.params,
        "upconv3": tape.upconvs[2].group.mlp_tape.params,
        "upconv4": tape.upconvs[3].group.mlp_tape.params,
        "regress": tape.regress.params,
    }
    if not spec.share_frame_encoders:
        out[n1b] = tape.f2_conv1.group.mlp_tape.params
        out[n2b] = tape.f2_conv2.group.mlp_tape.params
    return out
