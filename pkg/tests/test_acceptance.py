"""Acceptance criteria 1-8. Each test prints one ``criterion N: PASS|FAIL`` line.

Criteria 5-7 train models and take most of the suite's runtime (about 30 minutes
on one core for criterion 6).
"""

import time

import numpy as np
import pytest

from vagnet import tensor as tc
from vagnet.data import SplitSpec, generate_sample, make_splits, read_sample, write_sample
from vagnet.experiments import ablation_benchmark, overfit_sanity, video_necessity, wins
from vagnet.gradcheck import GRAPH_TOL, OP_TOL, all_cases, run_case
from vagnet.harness import (Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train)
from vagnet.mcam import contextual_attend, inject_2d_to_3d
from vagnet.metrics import aiou, auc, sim
from vagnet.model import VAGNet

# pinned tolerances and thresholds
GRAD_RUNTIME_S = 120.0
MIN_E2E_COORDS = 20
ROW_SUM_TOL = 1e-9
FOLD_TOL = 1e-12
SIM_TOL = 1e-12
AUC_CASES = 200
OVERFIT_LOSS = 0.05
OVERFIT_AIOU = 90.0
OVERFIT_RUNTIME_S = 120.0
ABLATION_AIOU_MARGIN = 10.0
ABLATION_MIN_WINS = 3
ABLATION_RUNTIME_S = 30 * 60.0
VIDEO_AIOU_MARGIN = 20.0


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    return emit


def test_criterion_1_gradient_suite(report):
    t0 = time.perf_counter()
    rows = [(c, run_case(c)) for c in all_cases()]
    secs = time.perf_counter() - t0
    op_ok = all(r.error <= OP_TOL for c, r in rows if c.module != "end_to_end")
    e2e = [(c, r) for c, r in rows if c.module == "end_to_end"]
    e2e_ok = bool(e2e) and all(r.error <= GRAPH_TOL and c.n_coords >= MIN_E2E_COORDS for c, r in e2e)
    worst_op = max(r.error for c, r in rows if c.module != "end_to_end")
    worst_e2e = max(r.error for _, r in e2e)
    ok = op_ok and e2e_ok and secs <= GRAD_RUNTIME_S
    report(1, ok, f"{len(rows)} cases, worst op {worst_op:.2e}, worst end-to-end {worst_e2e:.2e}, {secs:.0f}s")
    assert ok


def test_criterion_2_shape_contract(report, mug_sample):
    model = VAGNet.init(seed=0)
    model.forward(model.prepare(mug_sample), keep_trace=True)
    want = {"F_p": (32, 64), "F_i": (32, 8, 8), "F_v": (8, 32, 8, 8), "F_2d": (32, 8, 8),
            "F_3d": (32, 512), "F_pv": (32, 512), "F_f": (32, 512), "A_pred": (512, 1)}
    got = {k: model.trace[k].shape for k in want}
    ok = got == want
    report(2, ok, ", ".join(f"{k} {'x'.join(map(str, v))}" for k, v in got.items()))
    assert ok, got


def test_criterion_3_attention_invariants(report, mug_sample):
    model = VAGNet.init(seed=0)
    model.forward(model.prepare(mug_sample), keep_trace=True)
    tr = model.trace
    rows = [a.data for a in tr["contextual_maps"]] + [tr["inject_attention"].data, tr["stfm_attention"].data]
    row_err = max(float(np.max(np.abs(a.sum(axis=-1) - 1))) for a in rows)
    rng = np.random.default_rng(0)
    fold_err = 0.0
    for shape in [(1, 1, 1), (3, 5, 7), (32, 8, 8)]:
        x = rng.normal(size=shape)
        fold_err = max(fold_err, float(np.max(np.abs(tc.fold(tc.unfold(x), *shape[1:]).data - x))))
    p = model.mcam
    saved = p.w_v.data
    p.w_v.data = np.zeros_like(saved)
    F_p = tr["F_p"].data
    residual_exact = np.array_equal(inject_2d_to_3d(F_p, tr["F_2d"].data, p).data, F_p)
    p.w_v.data = saved
    ok = row_err <= ROW_SUM_TOL and fold_err <= FOLD_TOL and residual_exact
    report(3, ok, f"row-sum err {row_err:.1e}, fold/unfold err {fold_err:.1e}, V=0 residual exact {residual_exact}")
    assert ok


def brute_auc(p, g):
    pos, neg = p[g == 1], p[g == 0]
    hits = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return 100.0 * hits / (len(pos) * len(neg))


def set_aiou_values(p, g):
    truth = {i for i in range(len(g)) if g[i] == 1}
    out = []
    for k in range(1, 100):
        hit = {i for i in range(len(p)) if p[i] >= k / 100}
        union = hit | truth
        out.append(len(hit & truth) / len(union) if union else 1.0)
    return out


def test_criterion_4_metric_oracles(report):
    from vagnet.metrics import THRESHOLDS, iou_at
    rng = np.random.default_rng(4)
    auc_bad = aiou_bad = mono_bad = 0
    sim_err = 0.0
    for i in range(AUC_CASES):
        n = int(rng.integers(4, 60))
        p = np.round(rng.uniform(size=n), int(rng.integers(1, 4)))  # coarse grids force ties
        g = (rng.uniform(size=n) > 0.5).astype(float)
        g[:2] = [0, 1]
        auc_bad += auc(p, g) != brute_auc(p, g)
        mono_bad += not (auc(p, g) == auc(np.exp(3 * p), g) == auc(p ** 3 + 1, g))
        ious = set_aiou_values(p, g)
        aiou_bad += [iou_at(p, g, t) for t in THRESHOLDS] != ious
        aiou_bad += abs(aiou(p, g) - 100 * sum(ious) / 99) > 1e-12
        a, b = rng.uniform(size=(2, n))
        sim_err = max(sim_err, abs(sim(a, b) - sim(b, a)), abs(sim(a, a) - 1.0))
    ok = auc_bad == 0 and aiou_bad == 0 and mono_bad == 0 and sim_err <= SIM_TOL
    report(4, ok, f"{AUC_CASES} cases: auc mismatches {auc_bad}, aiou mismatches {aiou_bad}, "
                  f"monotone mismatches {mono_bad}, sim err {sim_err:.1e}")
    assert ok


def test_criterion_5_overfit_sanity(report):
    res = overfit_sanity()
    a = res.metrics["aiou"]
    ok = res.final_loss < OVERFIT_LOSS and a is not None and a >= OVERFIT_AIOU and res.seconds <= OVERFIT_RUNTIME_S
    report(5, ok, f"loss {res.final_loss:.4f}, aIoU {a:.2f}, {res.seconds:.0f}s")
    assert ok


def test_criterion_6_directional_ablation(report):
    t0 = time.perf_counter()
    bench = ablation_benchmark(seed=0, epochs=60)
    secs = time.perf_counter() - t0
    full = bench.rows["full"].seen
    margin = full.aiou - bench.rows["stfm_only"].seen.aiou
    row_wins = {k: wins(full, r.seen) for k, r in bench.rows.items() if k != "full"}
    ok = margin >= ABLATION_AIOU_MARGIN and min(row_wins.values()) >= ABLATION_MIN_WINS \
        and secs <= ABLATION_RUNTIME_S
    with_table = "; ".join(f"{k} wins {v}/4" for k, v in row_wins.items())
    report(6, ok, f"full - stfm_only aIoU {margin:+.2f}; {with_table}; {secs:.0f}s")
    print(bench.table())
    assert ok


def test_criterion_7_video_necessity(report):
    bench = video_necessity(seed=0, epochs=60)
    full, img = bench.rows["full"].seen, bench.rows["img_mode"].seen
    margin = full.aiou - img.aiou
    ok = margin >= VIDEO_AIOU_MARGIN
    report(7, ok, f"full aIoU {full.aiou:.2f}, img mode {img.aiou:.2f}, margin {margin:+.2f}")
    print(bench.table())
    assert ok


def test_criterion_8_determinism_and_serialization(report, tmp_path):
    samples = [generate_sample(c, a, s) for c, a, s in (("mug", "grasp", 1), ("drawer", "open", 2))]
    cfg = TrainConfig(epochs=2, batch_size=1, lr0=1e-3, eval_each_epoch=False)
    a, b = train(cfg, samples), train(cfg, samples)
    curves_equal = a.step_losses == b.step_losses
    entry = write_sample(samples[0], tmp_path / "s")
    sample_rt = read_sample(tmp_path / "s", entry) == samples[0]
    save_checkpoint(a.checkpoint, tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    ckpt_rt = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    entries, made = make_splits(SplitSpec.default(0), 1)
    seen = {(s.category, s.affordance) for s in made if s.split != "unseen-eval"}
    unseen = {(s.category, s.affordance) for s in made if s.split == "unseen-eval"}
    disjoint = not seen & unseen and len({e.id for e in entries}) == len(entries)
    ok = curves_equal and sample_rt and ckpt_rt and disjoint
    report(8, ok, f"loss curves equal {curves_equal}, sample roundtrip {sample_rt}, "
                  f"checkpoint roundtrip {ckpt_rt}, splits disjoint {disjoint}")
    assert ok
