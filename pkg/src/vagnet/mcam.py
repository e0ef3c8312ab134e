"""Multimodal contextual alignment: projection-vs-frame contextual attention,
temporal fusion of the reconstructions, injection into point features, and
upsampling back to every input point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .encoders import ContractError, EncoderConfig, PointEncoderState
from .geometry import knn_interpolate
from .params import constant, uniform
from .tensor import RunningStats, Tensor

NORM_EPS = 1e-8


@dataclass
class McamParams:
    w1: Tensor          # (T*C) x 2C
    w2: Tensor          # 2C x C
    bn_gamma: Tensor
    bn_beta: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    bn_running: RunningStats = field(default=None, repr=False)

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator) -> "McamParams":
        c, ch = cfg.C, 2 * cfg.C
        return cls(uniform(rng, (cfg.T * c, ch), cfg.T * c), uniform(rng, (ch, c), ch),
                   constant(1.0, (c,)), constant(0.0, (c,)),
                   uniform(rng, (c, c), c), uniform(rng, (c, c), c), uniform(rng, (c, c), c),
                   RunningStats.fresh(c))


@dataclass
class PropagationParams:
    """Linear + relu mixing applied after the N_p -> N interpolation."""

    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator) -> "PropagationParams":
        return cls(uniform(rng, (cfg.C, cfg.C), cfg.C), uniform(rng, (cfg.C,), cfg.C))


def l2_normalize_rows(x: Tensor) -> Tensor:
    return x / (tc.sqrt(tc.sum_(x * x, axis=1, keepdims=True)) + NORM_EPS)


def contextual_attend(F_i, f_v_t) -> tuple[Tensor, Tensor]:
    """Reconstruct the foreground map from background patches.

    Returns the folded reconstruction (C x H' x W') and the L x L attention
    whose rows are foreground patches and columns background patches.
    """
    F_i, f_v_t = tc.as_tensor(F_i), tc.as_tensor(f_v_t)
    if F_i.shape != f_v_t.shape or F_i.ndim != 3:
        raise ContractError(f"foreground {F_i.shape} and background {f_v_t.shape} grids differ")
    c, h, w = F_i.shape
    f = tc.unfold(F_i)
    b = tc.unfold(f_v_t)
    d = 9 * c
    sim = l2_normalize_rows(f) @ tc.transpose(l2_normalize_rows(b))
    att = tc.softmax(sim * (1.0 / np.sqrt(d)), axis=1)
    # reconstruction uses the raw background patches
    return tc.fold(att @ b, h, w, normalize=True), att


def temporal_fuse(frames, params: McamParams, training: bool = True,
                  use_running_stats: bool = False) -> Tensor:
    """relu(BN(W2 relu(W1 tokens))) over spatial tokens of the channel-stacked frames.

    BN statistics come from the spatial tokens of this one sample. With
    ``use_running_stats`` (and not training) the tracked running statistics
    are used instead.
    """
    frames = [tc.as_tensor(f) for f in frames]
    t = params.w1.shape[0] // frames[0].shape[0]
    if len(frames) != t:
        raise ContractError(f"temporal_fuse expects {t} frames, got {len(frames)}")
    c, h, w = frames[0].shape
    cat = tc.reshape(tc.concat(frames, axis=0), (t * c, h * w))        # (T*C) x L
    hid = tc.relu(tc.transpose(cat) @ params.w1)                          # L x 2C
    mixed = tc.transpose(hid @ params.w2)                                 # C x L
    if training or not use_running_stats:
        # running stats only advance during training
        normed = tc.batchnorm(mixed, params.bn_gamma, params.bn_beta, eps=1e-5,
                              running=params.bn_running if training else None, training=True)
    else:
        normed = tc.batchnorm(mixed, params.bn_gamma, params.bn_beta, eps=1e-5,
                              running=params.bn_running, training=False)
    return tc.reshape(tc.relu(normed), (c, h, w))


def inject_2d_to_3d(F_p, F_2d, params: McamParams, return_attention: bool = False):
    """F_a = F_p + (softmax(Q K^T / sqrt(C)) V)^T with points as queries."""
    F_p, F_2d = tc.as_tensor(F_p), tc.as_tensor(F_2d)
    c = F_p.shape[0]
    if F_2d.shape[0] != c:
        raise ContractError(f"channel mismatch: F_p {F_p.shape}, F_2d {F_2d.shape}")
    tokens = tc.transpose(tc.reshape(F_2d, (c, -1)))                      # L x C
    q = tc.transpose(F_p) @ params.w_q                                    # N_p x C
    k = tokens @ params.w_k
    v = tokens @ params.w_v
    att = tc.softmax(q @ tc.transpose(k) * (1.0 / np.sqrt(c)), axis=1)   # N_p x L
    F_a = F_p + tc.transpose(att @ v)
    return (F_a, att) if return_attention else F_a


def upsample(F_a, state: PointEncoderState, prop: PropagationParams) -> Tensor:
    """N_p -> N feature propagation followed by a linear + relu mix."""
    groups = state.groups
    interp = knn_interpolate(groups.coords[2], F_a, groups.coords[0], weights=groups.upsample)
    return tc.transpose(tc.relu(tc.transpose(interp) @ prop.w + prop.b))


def mcam_forward(F_p, state: PointEncoderState, F_i, F_v, params: McamParams, prop: PropagationParams,
                 contextual: bool = True, training: bool = True, use_running_stats: bool = False,
                 trace: dict | None = None) -> Tensor:
    """Full 2D branch: T contextual pairs -> F_2d -> F_a -> F_3d (C x N).

    ``contextual=False`` replaces each contextual reconstruction by F_i itself.
    """
    F_v = tc.as_tensor(F_v)
    frames, maps = [], []
    for t in range(F_v.shape[0]):
        if contextual:
            rec, att = contextual_attend(F_i, F_v[t])
            frames.append(rec)
            maps.append(att)
        else:
            frames.append(F_i)
    F_2d = temporal_fuse(frames, params, training=training, use_running_stats=use_running_stats)
    F_a, inj = inject_2d_to_3d(F_p, F_2d, params, return_attention=True)
    F_3d = upsample(F_a, state, prop)
    if trace is not None:
        trace.update(F_2d=F_2d, F_a=F_a, contextual_maps=maps, inject_attention=inj)
    return F_3d
