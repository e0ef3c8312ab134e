"""Finite-difference gradient suite over every differentiable op and the full graph.

Each case reduces an op's output to a scalar through a fixed random weighting
(so every output entry contributes) and compares autodiff against central
differences with h = 1e-5 in float64. Inputs keep clear of relu/clamp kinks
and max ties so the finite difference stays on one smooth piece.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as tc
from .decoder import DecoderParams, decode_affordance, dice_loss, focal_loss, total_loss
from .encoders import (EncoderConfig, ImageEncoderParams, PointEncoderParams, VideoEncoderParams,
                       encode_image, encode_points, encode_video, group_points)
from .mcam import (McamParams, PropagationParams, contextual_attend, inject_2d_to_3d, l2_normalize_rows,
                   mcam_forward, temporal_fuse, upsample)
from .params import named_tensors
from .stfm import StfmParams, stfm_cross_attend, stfm_fuse
from .tensor import Tensor

OP_TOL = 1e-4
GRAPH_TOL = 1e-3
H = 1e-5
MODULES = ("tensor_core", "encoders", "mcam", "stfm", "decoder_loss", "end_to_end")


@dataclass
class GradRow:
    module: str
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol


@dataclass
class Case:
    module: str
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]
    n_coords: int | None = None
    tol: float = OP_TOL


def _leaf(rng, shape, lo=-1.0, hi=1.0, away=0.05):
    """Uniform values with |x| >= away (keeps relu/clamp kinks out of reach)."""
    x = rng.uniform(lo, hi, size=shape)
    x = np.where(np.abs(x) < away, np.sign(x + 1e-12) * away, x)
    return Tensor(x, requires_grad=True)


def _weighted(rng, out_fn):
    """Scalar fn = sum(out * R) with R fixed at build time."""
    cache = {}

    def fn():
        out = out_fn()
        if "r" not in cache:
            cache["r"] = rng.normal(size=out.shape)
        return tc.sum_(out * cache["r"])
    return fn


def _unary(op, lo=-1.0, hi=1.0, shape=(3, 4)):
    def build(rng):
        x = _leaf(rng, shape, lo, hi)
        return _weighted(rng, lambda: op(x)), [x]
    return build


def _binary(op, shape_a=(3, 4), shape_b=(3, 4), lo_b=-1.0, hi_b=1.0):
    def build(rng):
        a = _leaf(rng, shape_a)
        b = _leaf(rng, shape_b, lo_b, hi_b)
        return _weighted(rng, lambda: op(a, b)), [a, b]
    return build


def _distinct(rng, shape):
    # a shuffled grid: entries differ by >= 1e-2, so max has no near ties
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * 0.02
    return Tensor(vals.reshape(shape), requires_grad=True)


def _tensor_cases() -> list[Case]:
    def bn(training):
        def build(rng):
            x = _leaf(rng, (4, 10))
            g, b = _leaf(rng, (4,), 0.5, 1.5), _leaf(rng, (4,))
            run = tc.RunningStats(rng.normal(size=4), rng.uniform(0.5, 2, size=4))
            return _weighted(rng, lambda: tc.batchnorm(x, g, b, running=None if training else run,
                                                       training=training)), [x, g, b]
        return build

    def take(rng):
        a = _leaf(rng, (5, 3))
        idx = rng.integers(0, 5, size=(4, 2))
        return _weighted(rng, lambda: tc.take(a, idx, axis=0)), [a]

    def max_(rng):
        a = _distinct(rng, (4, 5, 3))
        return _weighted(rng, lambda: tc.max_(a, axis=1)), [a]

    def concat(rng):
        a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 5))
        return _weighted(rng, lambda: tc.concat([a, b], axis=1)), [a, b]

    def stack(rng):
        a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
        return _weighted(rng, lambda: tc.stack([a, b], axis=1)), [a, b]

    def unfold(rng):
        x = _leaf(rng, (2, 4, 5))
        return _weighted(rng, lambda: tc.unfold(x)), [x]

    def fold(normalize):
        def build(rng):
            rows = _leaf(rng, (20, 18))
            return _weighted(rng, lambda: tc.fold(rows, 4, 5, normalize=normalize)), [rows]
        return build

    return [
        Case("tensor_core", "add_broadcast", _binary(tc.add, (3, 4), (4,))),
        Case("tensor_core", "sub", _binary(tc.sub)),
        Case("tensor_core", "mul_broadcast", _binary(tc.mul, (3, 4), (3, 1))),
        Case("tensor_core", "div", _binary(tc.div, lo_b=0.5, hi_b=2.0)),
        Case("tensor_core", "neg", _unary(tc.neg)),
        Case("tensor_core", "power", _unary(lambda x: tc.power(x, 3.0))),
        Case("tensor_core", "exp", _unary(tc.exp)),
        Case("tensor_core", "log", _unary(tc.log, 0.2, 2.0)),
        Case("tensor_core", "sqrt", _unary(tc.sqrt, 0.2, 2.0)),
        Case("tensor_core", "relu", _unary(tc.relu)),
        Case("tensor_core", "sigmoid", _unary(tc.sigmoid, -4, 4)),
        Case("tensor_core", "clamp", _unary(lambda x: tc.clamp(x, -0.5, 0.5))),
        Case("tensor_core", "sum_axis", _unary(lambda x: tc.sum_(x, axis=1))),
        Case("tensor_core", "mean", _unary(lambda x: tc.mean(x, axis=0, keepdims=True))),
        Case("tensor_core", "max", max_),
        Case("tensor_core", "reshape", _unary(lambda x: tc.reshape(x, (2, 6)))),
        Case("tensor_core", "transpose", _unary(lambda x: tc.transpose(x, (2, 0, 1)), shape=(2, 3, 4))),
        Case("tensor_core", "concat", concat),
        Case("tensor_core", "stack", stack),
        Case("tensor_core", "getitem", _unary(lambda x: x[1:, ::2])),
        Case("tensor_core", "take", take),
        Case("tensor_core", "matmul_batched", _binary(tc.matmul, (2, 3, 4), (4, 5))),
        Case("tensor_core", "softmax", _unary(lambda x: tc.softmax(x * 3.0, axis=-1))),
        Case("tensor_core", "unfold", unfold),
        Case("tensor_core", "fold", fold(True)),
        Case("tensor_core", "fold_unnormalized", fold(False)),
        Case("tensor_core", "batchnorm_train", bn(True)),
        Case("tensor_core", "batchnorm_eval", bn(False)),
        Case("tensor_core", "l2_normalize_rows", _unary(l2_normalize_rows, shape=(4, 6))),
    ]


def _all_trainable(*objs) -> list[Tensor]:
    out = []
    for o in objs:
        for t in named_tensors(o).values():
            t.requires_grad = True
            out.append(t)
    return out


def _module_cases() -> list[Case]:
    small = EncoderConfig(C=8, N=64, N_p=8, T=3, n_mid=32, heads=2, video_frozen=False)

    def points(rng):
        coords = rng.uniform(-1, 1, size=(small.N, 3))
        p = PointEncoderParams.init(small, rng)
        groups = group_points(coords, small)
        return _weighted(rng, lambda: encode_points(coords, p, small, groups)[0]), _all_trainable(p)

    def image(rng):
        img = rng.uniform(0, 1, size=(1, small.H, small.W))
        p = ImageEncoderParams.init(small, rng)
        return _weighted(rng, lambda: encode_image(img, p, small)), _all_trainable(p)

    def video(rng):
        clip = rng.uniform(0, 1, size=(small.T, 1, small.H, small.W))
        p = VideoEncoderParams.init(small, rng)
        return _weighted(rng, lambda: encode_video(clip, p, small)), _all_trainable(p)

    def ctx(rng):
        a, b = _leaf(rng, (3, 4, 4)), _leaf(rng, (3, 4, 4))
        return _weighted(rng, lambda: contextual_attend(a, b)[0]), [a, b]

    def fuse(rng):
        p = McamParams.init(small, rng)
        frames = [_leaf(rng, (small.C, 3, 3)) for _ in range(small.T)]
        return (_weighted(rng, lambda: temporal_fuse(frames, p, training=True)),
                frames + [p.w1, p.w2, p.bn_gamma, p.bn_beta])

    def inject(rng):
        p = McamParams.init(small, rng)
        F_p, F_2d = _leaf(rng, (small.C, small.N_p)), _leaf(rng, (small.C, 3, 3))
        return _weighted(rng, lambda: inject_2d_to_3d(F_p, F_2d, p)), [F_p, F_2d, p.w_q, p.w_k, p.w_v]

    def up(rng):
        coords = rng.uniform(-1, 1, size=(small.N, 3))
        pe, prop = PointEncoderParams.init(small, rng), PropagationParams.init(small, rng)
        _, state = encode_points(coords, pe, small)
        F_a = _leaf(rng, (small.C, small.N_p))
        return _weighted(rng, lambda: upsample(F_a, state, prop)), [F_a, prop.w, prop.b]

    def mcam_full(rng):
        coords = rng.uniform(-1, 1, size=(small.N, 3))
        pe, prop = PointEncoderParams.init(small, rng), PropagationParams.init(small, rng)
        p = McamParams.init(small, rng)
        F_p, state = encode_points(coords, pe, small)
        F_p = Tensor(F_p.data, requires_grad=True)
        F_i, F_v = _leaf(rng, (small.C, 4, 4)), _leaf(rng, (small.T, small.C, 4, 4))
        fn = _weighted(rng, lambda: mcam_forward(F_p, state, F_i, F_v, p, prop))
        return fn, [F_p, F_i, F_v] + _all_trainable(p, prop)

    def stfm_attend(rng):
        p = StfmParams.init(small, rng)
        F_3d, F_v = _leaf(rng, (small.C, 12)), _leaf(rng, (small.T, small.C, 3, 3))
        return _weighted(rng, lambda: stfm_cross_attend(F_3d, F_v, p)), [F_3d, F_v] + _all_trainable(p)

    def stfm_fusion(rng):
        p = StfmParams.init(small, rng)
        a, b = _leaf(rng, (small.C, 12)), _leaf(rng, (small.C, 12))
        return _weighted(rng, lambda: stfm_fuse(a, b, p)), [a, b, p.fuse_w, p.fuse_b]

    def head(rng):
        p = DecoderParams.init(small, rng)
        F_f = _leaf(rng, (small.C, 12))
        return _weighted(rng, lambda: decode_affordance(F_f, p)), [F_f] + _all_trainable(p)

    def loss(fn_):
        def build(rng):
            pred = Tensor(rng.uniform(0.05, 0.95, size=(20, 1)), requires_grad=True)
            gt = rng.uniform(0, 1, size=(20, 1))
            return (lambda: fn_(pred, gt)), [pred]
        return build

    return [
        Case("encoders", "encode_points", points, n_coords=40),
        Case("encoders", "encode_image", image, n_coords=40),
        Case("encoders", "encode_video", video, n_coords=40),
        Case("mcam", "contextual_attend", ctx, n_coords=40),
        Case("mcam", "temporal_fuse", fuse, n_coords=40),
        Case("mcam", "inject_2d_to_3d", inject, n_coords=40),
        Case("mcam", "upsample", up, n_coords=40),
        Case("mcam", "mcam_forward", mcam_full, n_coords=40),
        Case("stfm", "stfm_cross_attend", stfm_attend, n_coords=40),
        Case("stfm", "stfm_fuse", stfm_fusion, n_coords=40),
        Case("decoder_loss", "decode_affordance", head, n_coords=40),
        Case("decoder_loss", "focal_loss", loss(focal_loss)),
        Case("decoder_loss", "dice_loss", loss(dice_loss)),
        Case("decoder_loss", "total_loss", loss(total_loss)),
    ]


def _graph_cases() -> list[Case]:
    from .data import generate_sample
    from .model import Ablation, VAGNet

    def graph(ablation: Ablation):
        def build(rng):
            s = generate_sample("mug", "grasp", int(rng.integers(1 << 30)))
            model = VAGNet.init(EncoderConfig(), ablation, seed=int(rng.integers(1 << 30)))
            inputs = model.prepare(s, cache_video=False)
            gt = s.points.heatmap.reshape(-1, 1)
            params = _all_trainable(model.point_enc, model.image_enc, model.video_enc, model.mcam,
                                    model.prop, model.stfm, model.decoder)
            return (lambda: total_loss(model(inputs), gt)), params
        return build

    rows = {"full": Ablation(), "stfm_only": Ablation(use_mcam=False, use_proj=False),
            "no_stfm": Ablation(use_stfm=False), "no_mcam": Ablation(use_mcam=False)}
    return [Case("end_to_end", name, graph(abl), n_coords=24, tol=GRAPH_TOL)
            for name, abl in rows.items()]


def all_cases() -> list[Case]:
    return _tensor_cases() + _module_cases() + _graph_cases()


def run_case(case: Case, seed: int = 0) -> GradRow:
    rng = np.random.default_rng([seed, zlib.crc32(case.name.encode())])
    fn, params = case.build(rng)
    err = tc.gradcheck(fn, params, n_coords=case.n_coords, rng=rng, h=H)
    return GradRow(case.module, case.name, err, case.tol)


def run_suite(module: str | None = None, seed: int = 0) -> Iterator[GradRow]:
    for case in all_cases():
        if module is None or case.module == module:
            yield run_case(case, seed)
