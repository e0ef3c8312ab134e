import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vagnet import tensor as tc
from vagnet.data import generate_sample, read_points, replicate_image_to_clip
from vagnet.decoder import CLAMP, decode_affordance
from vagnet.encoders import encode_image, encode_points
from vagnet.harness import (EVAL_COLUMNS, LOG_COLUMNS, AdamState, Checkpoint, CheckpointError,
                            NonFiniteError, TrainConfig, TrainConfigError, adamw_step, build_model,
                            cosine_lr, export_heatmap, load_checkpoint, read_records, save_checkpoint,
                            train)
from vagnet.mcam import mcam_forward
from vagnet.model import Ablation, AblationError, VAGNet
from vagnet.stfm import stfm_cross_attend, stfm_fuse
from vagnet.tensor import Tensor

TINY = TrainConfig(epochs=2, batch_size=2, lr0=1e-3, eval_each_epoch=False)


@pytest.fixture(scope="module")
def three_samples():
    return [generate_sample(c, a, s) for c, a, s in (("mug", "grasp", 1), ("pot", "lift", 2),
                                                     ("lamp", "press", 3))]


# -- optimizer and schedule ----------------------------------------------------------

def leaf(x):
    return {"x": Tensor(np.array(x, dtype=float), requires_grad=True)}


def test_adamw_zero_grad_no_decay_is_fixed_point():
    p = leaf([1.0, -2.0])
    adamw_step(p, {"x": np.zeros(2)}, AdamState(), lr=0.1, weight_decay=0.0)
    assert np.array_equal(p["x"].data, [1.0, -2.0])


def test_adamw_zero_grad_decay_is_pure_shrink():
    p = leaf([1.0, -2.0])
    adamw_step(p, {"x": np.zeros(2)}, AdamState(), lr=0.1, weight_decay=0.5)
    assert np.array_equal(p["x"].data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.5))


def test_adamw_minimizes_quadratic():
    p, st_ = leaf(1.0), AdamState()
    for _ in range(200):
        adamw_step(p, {"x": 2 * p["x"].data}, st_, lr=0.1, weight_decay=0.0)
    assert abs(p["x"].item()) < 0.01
    assert st_.step == 200


def test_adamw_rejects_non_finite_gradient():
    p = leaf([1.0, 2.0])
    with pytest.raises(NonFiniteError, match="decoder.b2"):
        adamw_step({"decoder.b2": p["x"]}, {"decoder.b2": np.array([1.0, np.nan])}, AdamState(), 0.1, 0.0)
    assert np.array_equal(p["x"].data, [1.0, 2.0])


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4, abs=1e-18)
    with pytest.raises(TrainConfigError):
        cosine_lr(101, 100, 1e-3)


@given(st.integers(1, 500), st.data())
def test_cosine_monotone(total, data):
    s = data.draw(st.integers(0, total - 1))
    assert cosine_lr(s + 1, total, 1.0) <= cosine_lr(s, total, 1.0)


# -- config and wiring -----------------------------------------------------------------

def test_train_config_validation():
    for bad in (dict(epochs=0), dict(batch_size=0), dict(lr0=0.0), dict(weight_decay=-1.0),
                dict(img_frame=8)):
        with pytest.raises(TrainConfigError):
            TrainConfig(**bad)
    with pytest.raises(AblationError):
        TrainConfig(use_proj=False, use_mcam=True)


def manual_forward(m: VAGNet, sample):
    inp = m.prepare(sample)
    F_p, state = encode_points(inp.coords, m.point_enc, m.cfg)
    F_v = inp.video_features
    F_i = encode_image(inp.projection, m.image_enc, m.cfg)
    F_3d = mcam_forward(F_p, state, F_i, F_v, m.mcam, m.prop)
    return decode_affordance(stfm_fuse(F_3d, stfm_cross_attend(F_3d, F_v, m.stfm), m.stfm), m.decoder)


def test_full_ablation_reproduces_unablated_graph(mug_sample):
    m = VAGNet.init(ablation=Ablation(), seed=9)
    assert np.array_equal(m(m.prepare(mug_sample)).data, manual_forward(m, mug_sample).data)


def test_stfm_only_checkpoint_has_no_mcam_parameters(tmp_path, mug_sample):
    cfg = TrainConfig(use_mcam=False, use_proj=False)
    ck = Checkpoint(build_model(cfg), cfg)
    save_checkpoint(ck, tmp_path / "c.ckpt")
    names = [n for n in read_records(tmp_path / "c.ckpt") if n.startswith(("param/", "buffer/", "adam."))]
    assert not any("mcam" in n or "image_enc" in n for n in names)
    assert any(n.startswith("param/stfm.") for n in names)


def test_img_mode_consumes_replicated_frame(mug_sample):
    m = build_model(TrainConfig(img_mode=True, img_frame=2))
    inp = m.prepare(mug_sample)
    assert np.array_equal(inp.clip, replicate_image_to_clip(mug_sample.clip[2], 8))
    assert m(inp).shape == (512, 1)


# -- training ---------------------------------------------------------------------------

def test_training_is_deterministic(three_samples):
    a = train(TINY, three_samples)
    b = train(TINY, three_samples)
    assert a.step_losses == b.step_losses
    assert len(a.step_losses) == 4
    for k, p in a.checkpoint.model.named_parameters().items():
        assert np.array_equal(p.data, b.checkpoint.model.named_parameters()[k].data)


def test_training_writes_checkpoint_and_log(three_samples, tmp_path):
    out = tmp_path / "run.ckpt"
    res = train(TINY, three_samples[:2], three_samples[2:], out=out)
    lines = (tmp_path / "run.ckpt.log").read_text().splitlines()
    assert lines[0].split(",") == list(LOG_COLUMNS + EVAL_COLUMNS)
    assert len(lines) == 3 and all(len(l.split(",")) == len(lines[0].split(",")) for l in lines)
    ck = load_checkpoint(out)
    assert ck.epoch == 2 and ck.optimizer.step == 2 and ck.config == TINY
    s = three_samples[0]
    assert np.array_equal(ck.model.predict(s), res.checkpoint.model.predict(s))


def test_checkpoint_roundtrip_bitwise(three_samples, tmp_path):
    res = train(TrainConfig(epochs=1, batch_size=3, eval_each_epoch=False), three_samples)
    save_checkpoint(res.checkpoint, tmp_path / "a.ckpt")
    ck = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(ck, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for k in res.checkpoint.optimizer.m:
        assert np.array_equal(ck.optimizer.m[k], res.checkpoint.optimizer.m[k])
    assert np.array_equal(ck.model.buffers()["mcam.bn_running.mean"],
                          res.checkpoint.model.buffers()["mcam.bn_running.mean"])


def test_checkpoint_corruption(tmp_path, desk_model):
    path = tmp_path / "c.ckpt"
    save_checkpoint(Checkpoint(desk_model, TrainConfig()), path)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
    path.write_bytes(raw[:-9])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_non_finite_loss_aborts(three_samples):
    model = build_model(TINY)
    model.decoder.b2.data = np.array([np.nan])
    with pytest.raises(NonFiniteError, match="epoch 1"):
        train(TINY, three_samples, model=model)


def test_empty_training_split():
    with pytest.raises(TrainConfigError):
        train(TINY, [])


# -- export -------------------------------------------------------------------------------

def test_export_line_count_and_range(desk_model, mug_sample, tmp_path):
    path = export_heatmap(desk_model.eval(), mug_sample, tmp_path / "h.txt")
    back = read_points(path)
    assert back.n == 512
    assert np.array_equal(back.coords, mug_sample.points.coords)
    assert np.all((back.heatmap > 0) & (back.heatmap < 1))


def test_export_rigged_oracle_matches_gt(mug_sample, tmp_path):
    gt = mug_sample.points.heatmap
    back = read_points(export_heatmap(lambda s: s.points.heatmap, mug_sample, tmp_path / "h.txt"))
    # the file stores float32, so the clamp bound widens by one float32 step
    assert np.max(np.abs(back.heatmap - gt)) <= CLAMP + np.finfo(np.float32).eps
