"""Spatial-temporal fusion: point features attend to every frame's patch tokens,
the per-frame results are mixed along time, then fused with the 3D feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .encoders import ContractError, EncoderConfig
from .params import uniform
from .tensor import Tensor


@dataclass
class StfmParams:
    u_q: Tensor
    u_k: Tensor
    u_v: Tensor
    time_w: Tensor     # T
    time_b: Tensor     # 1
    fuse_w: Tensor     # 2C x C
    fuse_b: Tensor     # C

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator) -> "StfmParams":
        c, t = cfg.C, cfg.T
        return cls(uniform(rng, (c, c), c), uniform(rng, (c, c), c), uniform(rng, (c, c), c),
                   uniform(rng, (t,), t), uniform(rng, (1,), t),
                   uniform(rng, (2 * c, c), 2 * c), uniform(rng, (c,), 2 * c))


def frame_attention(F_3d, F_v, params: StfmParams) -> tuple[Tensor, Tensor]:
    """Per-frame cross-attention before time mixing.

    Returns (T x C x N outputs, T x N x L attention rows).
    """
    F_3d, F_v = tc.as_tensor(F_3d), tc.as_tensor(F_v)
    c, n = F_3d.shape
    if F_v.ndim != 4 or F_v.shape[1] != c:
        raise ContractError(f"F_v must be T x {c} x H' x W', got {F_v.shape}")
    t = F_v.shape[0]
    tokens = tc.transpose(tc.reshape(F_v, (t, c, -1)), (0, 2, 1))         # T x L x C
    # the same queries serve every frame (F_3d repeated over time)
    q = tc.transpose(F_3d) @ params.u_q                                    # N x C
    k = tokens @ params.u_k                                                # T x L x C
    v = tokens @ params.u_v
    att = tc.softmax(q @ tc.transpose(k, (0, 2, 1)) * (1.0 / np.sqrt(c)), axis=-1)   # T x N x L
    out = tc.transpose(att @ v, (0, 2, 1))                                 # T x C x N
    return out, att


def stfm_cross_attend(F_3d, F_v, params: StfmParams, return_attention: bool = False):
    per_frame, att = frame_attention(F_3d, F_v, params)
    t, c, n = per_frame.shape
    if params.time_w.shape != (t,):
        raise ContractError(f"time mixing expects {params.time_w.shape[0]} frames, got {t}")
    mixed = tc.reshape(params.time_w, (1, t)) @ tc.reshape(per_frame, (t, c * n))
    F_pv = tc.reshape(mixed, (c, n)) + params.time_b
    return (F_pv, att) if return_attention else F_pv


def stfm_fuse(F_3d, F_pv, params: StfmParams) -> Tensor:
    F_3d, F_pv = tc.as_tensor(F_3d), tc.as_tensor(F_pv)
    if F_3d.shape != F_pv.shape:
        raise ContractError(f"F_3d {F_3d.shape} and F_pv {F_pv.shape} differ")
    cat = tc.concat([F_3d, F_pv], axis=0)                                  # 2C x N
    return tc.transpose(tc.transpose(cat) @ params.fuse_w + params.fuse_b)
