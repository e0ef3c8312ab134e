import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vagnet import tensor as tc
from vagnet.data import replicate_image_to_clip
from vagnet.encoders import ContractError, EncoderConfig
from vagnet.mcam import McamParams, contextual_attend, inject_2d_to_3d, temporal_fuse
from vagnet.model import Ablation, VAGNet
from vagnet.tensor import Tensor


def np_unfold(x):
    c, h, w = x.shape
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    rows = [p[:, i:i + 3, j:j + 3].transpose(1, 2, 0).reshape(-1) for i in range(h) for j in range(w)]
    return np.array(rows)


def np_softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_contextual_attention_matches_brute_force(rng):
    F_i, F_b = rng.normal(size=(2, 32, 8, 8))
    _, att = contextual_attend(F_i, F_b)
    f, b = np_unfold(F_i), np_unfold(F_b)
    f /= np.linalg.norm(f, axis=1, keepdims=True) + 1e-8
    b /= np.linalg.norm(b, axis=1, keepdims=True) + 1e-8
    scale = 1 / np.sqrt(288)
    assert scale == pytest.approx(0.05893, abs=1e-5)
    assert np.allclose(att.data, np_softmax(f @ b.T * scale), atol=1e-12)


def test_orthogonal_patches_concentrate_on_diagonal():
    # one-hot channel per site: distinct sites never share a (tap, channel) entry
    h = w = 3
    x = np.zeros((h * w, h, w))
    for k in range(h * w):
        x[k, k // w, k % w] = 1.0
    rows = np_unfold(x)
    gram = rows @ rows.T
    assert np.allclose(gram, np.diag(np.diag(gram)))
    _, att = contextual_attend(x, x)
    a = att.data
    assert np.all(np.argmax(a, axis=1) == np.arange(h * w))
    assert np.all(np.diag(a) > a.max(axis=1, where=~np.eye(h * w, dtype=bool), initial=0))


@given(st.integers(0, 2**31))
def test_constant_background_reconstructs_center_taps_exactly(seed):
    rng = np.random.default_rng(seed)
    c = 4
    F_i = rng.normal(size=(c, 5, 5))
    level = rng.normal(size=(c, 1, 1))
    bg = np.broadcast_to(level, (c, 5, 5)).copy()
    _, att = contextual_attend(F_i, bg)
    rec_rows = att.data @ np_unfold(bg)
    center = slice(4 * c, 5 * c)  # tap (1, 1) is never padded
    assert np.allclose(rec_rows[:, center], level.reshape(1, c), atol=1e-12)


def test_contextual_attend_rejects_mismatch():
    with pytest.raises(ContractError):
        contextual_attend(np.zeros((4, 5, 5)), np.zeros((4, 5, 6)))


def mcam_params(cfg=EncoderConfig(), seed=0):
    return McamParams.init(cfg, np.random.default_rng(seed))


def test_temporal_fuse_zero_input_zero_beta(desk_cfg):
    p = mcam_params(desk_cfg)
    out = temporal_fuse([np.zeros((32, 8, 8))] * 8, p)
    assert out.shape == (32, 8, 8)
    assert np.all(out.data == 0)


def test_temporal_fuse_frame_count(desk_cfg):
    with pytest.raises(ContractError):
        temporal_fuse([np.zeros((32, 8, 8))] * 3, mcam_params(desk_cfg))


def test_temporal_fuse_running_stats_only_move_in_training(desk_cfg, rng):
    p = mcam_params(desk_cfg)
    frames = list(rng.normal(size=(8, 32, 8, 8)))
    mean0 = p.bn_running.mean.copy()
    temporal_fuse(frames, p, training=False)
    assert np.array_equal(p.bn_running.mean, mean0)
    temporal_fuse(frames, p, training=True)
    assert not np.array_equal(p.bn_running.mean, mean0)


def test_inject_zero_logits_gives_rank_one_correction(desk_cfg, rng):
    p = mcam_params(desk_cfg)
    p.w_q.data[:] = 0
    p.w_k.data[:] = 0
    F_p = rng.normal(size=(32, 64))
    F_a, att = inject_2d_to_3d(F_p, rng.normal(size=(32, 8, 8)), p, return_attention=True)
    corr = F_a.data - F_p
    assert np.max(np.abs(corr - corr[:, :1])) <= 1e-9
    assert np.allclose(att.data, 1 / 64)


def test_inject_zero_values_is_identity(desk_cfg, rng):
    p = mcam_params(desk_cfg)
    p.w_v.data[:] = 0
    F_p = rng.normal(size=(32, 64))
    assert np.array_equal(inject_2d_to_3d(F_p, rng.normal(size=(32, 8, 8)), p).data, F_p)


@given(st.integers(0, 2**31))
def test_inject_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    p = mcam_params(seed=seed % 1000)
    _, att = inject_2d_to_3d(rng.normal(size=(32, 64)), rng.normal(size=(32, 8, 8)), p,
                             return_attention=True)
    assert att.shape == (64, 64)
    assert np.max(np.abs(att.data.sum(axis=1) - 1)) <= 1e-9


def test_mcam_output_shape(desk_model, mug_sample):
    desk_model.forward(desk_model.prepare(mug_sample), keep_trace=True)
    assert desk_model.trace["F_3d"].shape == (32, 512)
    assert desk_model.trace["F_2d"].shape == (32, 8, 8)
    assert len(desk_model.trace["contextual_maps"]) == 8


def test_replicated_video_matches_img_mode_bitwise(mug_sample):
    full = VAGNet.init(seed=11)
    img = VAGNet.init(ablation=Ablation(img_mode=True), seed=11)
    frozen = replicate_image_to_clip(mug_sample.clip[0], 8)
    a = full.prepare(mug_sample)
    a.clip = frozen
    a.video_features = full.video_features(frozen)
    full.forward(a, keep_trace=True)
    img.forward(img.prepare(mug_sample), keep_trace=True)
    assert np.array_equal(full.trace["F_3d"].data, img.trace["F_3d"].data)
    assert np.array_equal(full.trace["A_pred"].data, img.trace["A_pred"].data)


def test_contextual_off_uses_image_features(desk_model, mug_sample):
    m = VAGNet.init(ablation=Ablation(use_mcam=False), seed=3)
    m.forward(m.prepare(mug_sample), keep_trace=True)
    assert m.trace["contextual_maps"] == []
    assert m.trace["F_3d"].shape == (32, 512)


@given(st.integers(0, 2**31), st.floats(0.01, 100))
def test_background_rescaling(seed, scale):
    rng = np.random.default_rng(seed)
    F_i, F_b = rng.normal(size=(2, 4, 5, 5))
    rec, att = contextual_attend(F_i, F_b)
    rec_s, att_s = contextual_attend(F_i, scale * F_b)
    assert np.max(np.abs(att_s.data - att.data)) <= 1e-6
    assert np.allclose(rec_s.data, scale * rec.data, rtol=1e-5, atol=1e-9)
