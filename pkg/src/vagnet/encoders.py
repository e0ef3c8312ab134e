"""Small stand-ins for the point, image and video backbones.

Points: two set-abstraction levels (FPS + ball query + shared linear/relu +
max-pool). Image: 4x4 patch embedding followed by two residual channel-mixing
blocks. Video: the same patch stem followed by two divided space-time
attention blocks (temporal attention per site, then spatial attention per
frame).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .geometry import PointCloud, ball_query, farthest_point_sample, knn_weights
from .params import uniform
from .tensor import Tensor


class ContractError(ValueError):
    """Input does not match the configured sizes."""


@dataclass(frozen=True)
class EncoderConfig:
    C: int = 32
    N: int = 512
    N_p: int = 64
    T: int = 8
    H: int = 32
    W: int = 32
    H_f: int = 8
    W_f: int = 8
    heads: int = 4
    video_frozen: bool = True
    n_mid: int = 256
    radii: tuple[float, float] = (0.2, 0.4)
    max_neighbors: int = 16

    def __post_init__(self):
        if self.C % self.heads:
            raise ContractError(f"C={self.C} not divisible by heads={self.heads}")
        if self.H != 4 * self.H_f or self.W != 4 * self.W_f:
            raise ContractError("frame size must be 4x the feature grid")
        if not self.N_p <= self.n_mid <= self.N:
            raise ContractError("need N_p <= n_mid <= N")

    @property
    def L(self) -> int:
        return self.H_f * self.W_f


# ---------------------------------------------------------------------------
# points


@dataclass
class PointEncoderParams:
    sa1_w: Tensor
    sa1_b: Tensor
    sa2_w: Tensor
    sa2_b: Tensor

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator) -> "PointEncoderParams":
        c = cfg.C
        return cls(uniform(rng, (3, c), 3), uniform(rng, (c,), 3),
                   uniform(rng, (3 + c, c), 3 + c), uniform(rng, (c,), 3 + c))


@dataclass
class PointGroups:
    """Coordinate-only grouping structure; depends on the cloud, not on weights."""

    centers1: np.ndarray   # n_mid indices into level 0
    rel1: np.ndarray       # n_mid x k x 3
    centers2: np.ndarray   # N_p indices into level 1
    nbr2: np.ndarray       # N_p x k indices into level 1
    rel2: np.ndarray       # N_p x k x 3
    coords: list[np.ndarray] = field(default_factory=list)  # per-level coordinates
    upsample: np.ndarray | None = None  # N_p x N inverse-distance weights


@dataclass
class PointEncoderState:
    """Per-level (coords, features) snapshots; features are C x n_level (None at level 0)."""

    levels: list[tuple[np.ndarray, Tensor | None]]
    groups: PointGroups


def group_points(coords: np.ndarray, cfg: EncoderConfig) -> PointGroups:
    coords = np.asarray(coords, dtype=float)
    c1 = farthest_point_sample(coords, cfg.n_mid, start=0)
    nb1 = ball_query(coords, c1, cfg.radii[0], cfg.max_neighbors)
    x1 = coords[c1]
    rel1 = coords[nb1] - x1[:, None, :]
    c2 = farthest_point_sample(x1, cfg.N_p, start=0)
    nb2 = ball_query(x1, c2, cfg.radii[1], cfg.max_neighbors)
    x2 = x1[c2]
    rel2 = x1[nb2] - x2[:, None, :]
    up = knn_weights(x2, coords, 3)
    return PointGroups(c1, rel1, c2, nb2, rel2, [coords, x1, x2], up)


def encode_points(pc: PointCloud | np.ndarray, params: PointEncoderParams, cfg: EncoderConfig,
                  groups: PointGroups | None = None) -> tuple[Tensor, PointEncoderState]:
    coords = pc.coords if isinstance(pc, PointCloud) else np.asarray(pc, dtype=float)
    if coords.shape[0] != cfg.N:
        raise ContractError(f"expected {cfg.N} points, got {coords.shape[0]}")
    if groups is None:
        groups = group_points(coords, cfg)
    h1 = tc.relu(Tensor(groups.rel1) @ params.sa1_w + params.sa1_b)      # n_mid x k x C
    f1 = tc.max_(h1, axis=1)                                             # n_mid x C
    g2 = tc.take(f1, groups.nbr2, axis=0)                                # N_p x k x C
    h2 = tc.relu(tc.concat([Tensor(groups.rel2), g2], axis=2) @ params.sa2_w + params.sa2_b)
    f2 = tc.max_(h2, axis=1)                                             # N_p x C
    F_p = tc.transpose(f2)
    state = PointEncoderState(
        levels=[(groups.coords[0], None), (groups.coords[1], tc.transpose(f1)), (groups.coords[2], F_p)],
        groups=groups,
    )
    return F_p, state


# ---------------------------------------------------------------------------
# image


def _patchify(frames: Tensor, cfg: EncoderConfig) -> Tensor:
    """... x 1 x H x W -> ... x L x 16, patches in raster order."""
    lead = frames.shape[:-3]
    x = tc.reshape(frames, lead + (cfg.H_f, 4, cfg.W_f, 4))
    k = len(lead)
    x = tc.transpose(x, tuple(range(k)) + (k, k + 2, k + 1, k + 3))
    return tc.reshape(x, lead + (cfg.L, 16))


@dataclass
class ImageEncoderParams:
    patch_w: Tensor
    patch_b: Tensor
    res_w: list[Tensor]
    res_b: list[Tensor]

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator) -> "ImageEncoderParams":
        c = cfg.C
        return cls(uniform(rng, (16, c), 16), uniform(rng, (c,), 16),
                   [uniform(rng, (c, c), c) for _ in range(2)],
                   [uniform(rng, (c,), c) for _ in range(2)])


def encode_image(img, params: ImageEncoderParams, cfg: EncoderConfig) -> Tensor:
    img = tc.as_tensor(img)
    if img.shape != (1, cfg.H, cfg.W):
        raise ContractError(f"expected image 1 x {cfg.H} x {cfg.W}, got {img.shape}")
    x = _patchify(img, cfg) @ params.patch_w + params.patch_b          # L x C
    for w, b in zip(params.res_w, params.res_b):
        x = x + tc.relu(x @ w + b)
    return tc.reshape(tc.transpose(x), (cfg.C, cfg.H_f, cfg.W_f))


# ---------------------------------------------------------------------------
# video


@dataclass
class AttnParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    @classmethod
    def init(cls, c: int, rng: np.random.Generator, trainable: bool) -> "AttnParams":
        return cls(*(uniform(rng, (c, c), c, trainable) for _ in range(4)))


@dataclass
class VideoBlockParams:
    temporal: AttnParams
    spatial: AttnParams


@dataclass
class VideoEncoderParams:
    patch_w: Tensor
    patch_b: Tensor
    pos_space: Tensor
    pos_time: Tensor
    blocks: list[VideoBlockParams]

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator) -> "VideoEncoderParams":
        c, tr = cfg.C, not cfg.video_frozen
        return cls(uniform(rng, (16, c), 16, tr), uniform(rng, (c,), 16, tr),
                   uniform(rng, (cfg.L, c), c, tr), uniform(rng, (cfg.T, c), c, tr),
                   [VideoBlockParams(AttnParams.init(c, rng, tr), AttnParams.init(c, rng, tr))
                    for _ in range(2)])


def _mha(x: Tensor, p: AttnParams, heads: int, qk_bias: Tensor | None = None) -> Tensor:
    """Self-attention over axis -2 of a ... x S x C tensor.

    ``qk_bias`` (broadcastable to x) is added to the query/key inputs only, so
    sequences of identical tokens still average to that token.
    """
    *lead, s, c = x.shape
    dh = c // heads
    qk_in = x if qk_bias is None else x + qk_bias

    def split(t):
        t = tc.reshape(t, tuple(lead) + (s, heads, dh))
        k = len(lead)
        return tc.transpose(t, tuple(range(k)) + (k + 1, k, k + 2))      # ... h S dh

    q, k_, v = split(qk_in @ p.wq), split(qk_in @ p.wk), split(x @ p.wv)
    att = tc.softmax(q @ tc.transpose(k_, tuple(range(k_.ndim - 2)) + (k_.ndim - 1, k_.ndim - 2))
                     * (1.0 / np.sqrt(dh)), axis=-1)
    o = att @ v                                                           # ... h S dh
    n = len(lead)
    o = tc.transpose(o, tuple(range(n)) + (n + 1, n, n + 2))
    return tc.reshape(o, tuple(lead) + (s, c)) @ p.wo


def encode_video(clip, params: VideoEncoderParams, cfg: EncoderConfig) -> Tensor:
    clip = tc.as_tensor(clip)
    if clip.shape != (cfg.T, 1, cfg.H, cfg.W):
        raise ContractError(f"expected clip {cfg.T} x 1 x {cfg.H} x {cfg.W}, got {clip.shape}")
    x = _patchify(clip, cfg) @ params.patch_w + params.patch_b + params.pos_space   # T x L x C
    for blk in params.blocks:
        xs = tc.transpose(x, (1, 0, 2))                                              # L x T x C
        xs = xs + _mha(xs, blk.temporal, cfg.heads, qk_bias=params.pos_time)
        x = tc.transpose(xs, (1, 0, 2))
        x = x + _mha(x, blk.spatial, cfg.heads)
    return tc.reshape(tc.transpose(x, (0, 2, 1)), (cfg.T, cfg.C, cfg.H_f, cfg.W_f))
