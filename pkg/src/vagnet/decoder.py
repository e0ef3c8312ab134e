"""Per-point affordance head and the focal + dice objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .encoders import ContractError, EncoderConfig
from .params import uniform
from .tensor import Tensor

CLAMP = 1e-7


@dataclass
class DecoderParams:
    d1: Tensor
    b1: Tensor
    d2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator) -> "DecoderParams":
        c = cfg.C
        return cls(uniform(rng, (c, c), c), uniform(rng, (c,), c),
                   uniform(rng, (c, 1), c), uniform(rng, (1,), c))


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    alpha: float = 0.25
    eps_dice: float = 1.0

    def __post_init__(self):
        if self.gamma < 0 or not 0 < self.alpha < 1 or self.eps_dice <= 0:
            raise ValueError(f"invalid loss config {self}")


def decode_affordance(F_f, params: DecoderParams) -> Tensor:
    """C x N features -> N x 1 probabilities."""
    x = tc.transpose(tc.as_tensor(F_f))
    return tc.sigmoid(tc.relu(x @ params.d1 + params.b1) @ params.d2 + params.b2)


def _check(pred: Tensor, gt: Tensor) -> None:
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and target {gt.shape} differ")


def focal_loss(pred, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    """Soft-target focal loss, averaged over points."""
    pred, gt = tc.as_tensor(pred), tc.as_tensor(gt)
    _check(pred, gt)
    p = tc.clamp(pred, CLAMP, 1 - CLAMP)
    g = gt.data
    pos = cfg.alpha * g * (1 - p) ** cfg.gamma * tc.log(p)
    neg = (1 - cfg.alpha) * (1 - g) * p ** cfg.gamma * tc.log(1 - p)
    return -tc.mean(pos + neg)


def dice_loss(pred, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    pred, gt = tc.as_tensor(pred), tc.as_tensor(gt)
    _check(pred, gt)
    inter = tc.sum_(pred * gt.data)
    return 1 - (2 * inter + cfg.eps_dice) / (tc.sum_(pred) + float(gt.data.sum()) + cfg.eps_dice)


def total_loss(pred, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    return focal_loss(pred, gt, cfg) + dice_loss(pred, gt, cfg)
