"""Heatmap evaluation: AUC, aIoU, SIM and MAE.

AUC and aIoU compare a score map with a binary ground truth (soft targets are
binarized at 0.5 by ``evaluate_split``). A metric that is undefined for a
sample raises ``UndefinedMetric``; split-level averages skip such samples and
report how many were skipped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Callable, Iterable

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

THRESHOLDS = np.round(np.arange(1, 100) / 100.0, 2)
GT_THRESHOLD = 0.5
METRICS = ("auc", "aiou", "sim", "mae")


class UndefinedMetric(ValueError):
    """The metric has no value for this input (e.g. single-class ground truth)."""


class MetricConfigError(ValueError):
    pass


def _flat(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _flat(pred), _flat(gt)
    if p.shape != g.shape:
        raise MetricConfigError(f"prediction has {p.size} entries, target has {g.size}")
    return p, g


def _binary(gt: np.ndarray) -> np.ndarray:
    if not np.all((gt == 0) | (gt == 1)):
        raise MetricConfigError("ground truth for auc/aiou must be binary")
    pos = gt == 1
    if pos.all() or not pos.any():
        raise UndefinedMetric("ground truth has a single class")
    return pos


def auc(pred, gt_binary) -> float:
    """ROC area from the rank-sum statistic (ties get average ranks), in percent."""
    p, g = _pair(pred, gt_binary)
    pos = _binary(g)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    ranks = rankdata(p)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return 100.0 * u / (n_pos * n_neg)


def iou_at(pred, gt_binary, tau: float) -> float:
    p, g = _pair(pred, gt_binary)
    hit, truth = p >= tau, g == 1
    union = np.count_nonzero(hit | truth)
    if union == 0:
        return 1.0
    return np.count_nonzero(hit & truth) / union


def aiou(pred, gt_binary) -> float:
    """IoU averaged over thresholds 0.01 .. 0.99, in percent."""
    p, g = _pair(pred, gt_binary)
    _binary(g)
    return 100.0 * float(np.mean([iou_at(p, g, tau) for tau in THRESHOLDS]))


def sim(pred, gt) -> float:
    """Histogram intersection of the two sum-normalized maps."""
    p, g = _pair(pred, gt)
    if (p < 0).any() or (g < 0).any():
        raise MetricConfigError("sim needs nonnegative maps")
    sp, sg = p.sum(), g.sum()
    if sp == 0 or sg == 0:
        raise UndefinedMetric("sim of an all-zero map")
    return float(np.minimum(p / sp, g / sg).sum())


def mae(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean(np.abs(p - g)))


@dataclass
class SampleMetrics:
    id: str
    values: dict[str, float | None]


@dataclass
class EvalResult:
    auc: float
    aiou: float
    sim: float
    mae: float
    n_samples: int
    skipped: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("auc", "aiou"):
            v = getattr(self, name)
            if not np.isnan(v) and not 0 <= v <= 100:
                raise ValueError(f"{name}={v} outside [0, 100]")
        if not np.isnan(self.sim) and not 0 <= self.sim <= 1 + 1e-12:
            raise ValueError(f"sim={self.sim} outside [0, 1]")
        if not np.isnan(self.mae) and self.mae < 0:
            raise ValueError(f"mae={self.mae} negative")

    def as_dict(self) -> dict[str, float | int]:
        out: dict[str, float | int] = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "skipped"}
        for name in METRICS:
            out[f"skipped_{name}"] = self.skipped.get(name, 0)
        return out

    def report(self) -> str:
        return "\n".join(f"{k}={v!r}" for k, v in self.as_dict().items()) + "\n"

    def csv_header(self) -> str:
        return ",".join(self.as_dict())

    def csv_row(self) -> str:
        return ",".join(repr(v) for v in self.as_dict().values())


def sample_metrics(pred, gt) -> dict[str, float | None]:
    """All four metrics for one sample; undefined entries are None."""
    p, g = _pair(pred, gt)
    gb = (g > GT_THRESHOLD).astype(np.float64)
    out: dict[str, float | None] = {}
    for name, fn, target in (("auc", auc, gb), ("aiou", aiou, gb), ("sim", sim, g), ("mae", mae, g)):
        try:
            out[name] = fn(p, target)
        except UndefinedMetric:
            out[name] = None
    return out


def aggregate(per_sample: Iterable[dict[str, float | None]]) -> EvalResult:
    rows = list(per_sample)
    if not rows:
        raise MetricConfigError("nothing to evaluate: empty sample list")
    means, skipped = {}, {}
    for name in METRICS:
        vals = [r[name] for r in rows if r[name] is not None]
        skipped[name] = len(rows) - len(vals)
        means[name] = float(np.mean(vals)) if vals else float("nan")
        if skipped[name]:
            log.info("%s undefined for %d of %d samples", name, skipped[name], len(rows))
    return EvalResult(n_samples=len(rows), skipped=skipped, **means)


def evaluate_split(model, samples) -> EvalResult:
    """Average per-sample metrics of ``model`` over ``samples``.

    ``model`` is either an object with ``predict(sample) -> scores`` or a plain
    callable of that signature.
    """
    samples = list(samples)
    if not samples:
        raise MetricConfigError("nothing to evaluate: empty sample list")
    predict: Callable = getattr(model, "predict", model)
    return aggregate(sample_metrics(predict(s), s.points.heatmap) for s in samples)
