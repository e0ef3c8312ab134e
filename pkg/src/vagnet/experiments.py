"""Desk-scale experiments: the four-row ablation benchmark and the video-necessity check."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

from .data import SplitSpec, generate_sample, make_splits, valid_pairs
from .harness import TrainConfig, train
from .metrics import EvalResult, evaluate_split, sample_metrics

log = logging.getLogger(__name__)

# learning rate for desk-scale runs from random init (see README)
DESK_LR = 1e-3
# single-sample memorization: one step per epoch, so a larger step size
OVERFIT_LR = 5e-3

ABLATION_ROWS: dict[str, dict] = {
    "stfm_only": dict(use_mcam=False, use_proj=False),
    "no_stfm": dict(use_stfm=False),
    "no_mcam": dict(use_mcam=False),
    "full": {},
}

# the category whose two affordance parts mirror each other
SYMMETRIC_CATEGORY = "pot"


@dataclass
class RowResult:
    name: str
    seen: EvalResult
    unseen: EvalResult | None
    seconds: float
    final_loss: float


@dataclass
class BenchmarkResult:
    rows: dict[str, RowResult] = field(default_factory=dict)

    def table(self) -> str:
        head = f"{'row':<10} {'AUC':>7} {'aIoU':>7} {'SIM':>6} {'MAE':>6} | {'uAUC':>7} {'uaIoU':>7} {'sec':>6}"
        lines = [head]
        for r in self.rows.values():
            s, u = r.seen, r.unseen
            tail = f"{u.auc:7.2f} {u.aiou:7.2f}" if u else f"{'-':>7} {'-':>7}"
            lines.append(f"{r.name:<10} {s.auc:7.2f} {s.aiou:7.2f} {s.sim:6.3f} {s.mae:6.3f} | {tail} {r.seconds:6.0f}")
        return "\n".join(lines)


def wins(full: EvalResult, other: EvalResult) -> int:
    """Metrics (of four) on which ``full`` is strictly better; MAE is lower-is-better."""
    return int(full.auc > other.auc) + int(full.aiou > other.aiou) + int(full.sim > other.sim) \
        + int(full.mae < other.mae)


def ablation_benchmark(seed: int = 0, epochs: int = 60, lr0: float = DESK_LR, n_per_pair: int = 20,
                       rows: tuple[str, ...] = tuple(ABLATION_ROWS)) -> BenchmarkResult:
    """Train each ablation row on the default split and evaluate seen/unseen."""
    _, samples = make_splits(SplitSpec.default(seed), n_per_pair)
    train_set = [s for s in samples if s.split == "seen-train"]
    seen = [s for s in samples if s.split == "seen-eval"]
    unseen = [s for s in samples if s.split == "unseen-eval"]
    out = BenchmarkResult()
    for name in rows:
        cfg = TrainConfig(epochs=epochs, lr0=lr0, seed=seed, eval_each_epoch=False, **ABLATION_ROWS[name])
        t0 = time.perf_counter()
        res = train(cfg, train_set, seen)
        model = res.checkpoint.model
        out.rows[name] = RowResult(name, res.history[-1].eval, evaluate_split(model, unseen),
                                   time.perf_counter() - t0, res.history[-1].loss)
        log.info("%s done in %.0fs", name, out.rows[name].seconds)
    return out


def video_necessity(seed: int = 0, epochs: int = 60, lr0: float = DESK_LR, n_per_pair: int = 20,
                    img_frame: int = 0, category: str = SYMMETRIC_CATEGORY) -> BenchmarkResult:
    """Full model vs img mode (one pre-contact frame) on a mirror-symmetric category."""
    pairs = frozenset(p for p in valid_pairs() if p[0] == category)
    _, samples = make_splits(SplitSpec(pairs, frozenset(), seed), n_per_pair)
    train_set = [s for s in samples if s.split == "seen-train"]
    seen = [s for s in samples if s.split == "seen-eval"]
    base = TrainConfig(epochs=epochs, lr0=lr0, seed=seed, eval_each_epoch=False)
    out = BenchmarkResult()
    for name, cfg in (("full", base), ("img_mode", replace(base, img_mode=True, img_frame=img_frame))):
        t0 = time.perf_counter()
        res = train(cfg, train_set, seen)
        out.rows[name] = RowResult(name, res.history[-1].eval, None, time.perf_counter() - t0,
                                   res.history[-1].loss)
    return out


@dataclass
class OverfitResult:
    final_loss: float
    metrics: dict[str, float | None]
    seconds: float
    step_losses: list[float]


def overfit_sanity(category: str = "mug", affordance: str = "grasp", seed: int = 0, steps: int = 300,
                   lr0: float = OVERFIT_LR) -> OverfitResult:
    """Memorize one sample: batch 1, ``steps`` epochs of one step each."""
    s = generate_sample(category, affordance, seed)
    cfg = TrainConfig(epochs=steps, batch_size=1, lr0=lr0, seed=seed, eval_each_epoch=False)
    t0 = time.perf_counter()
    res = train(cfg, [s])
    seconds = time.perf_counter() - t0
    model = res.checkpoint.model
    return OverfitResult(res.step_losses[-1], sample_metrics(model.predict(s), s.points.heatmap), seconds,
                         res.step_losses)
