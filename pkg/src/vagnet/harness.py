"""Training loop, AdamW + cosine schedule, checkpoints and heatmap export."""

from __future__ import annotations

import dataclasses
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tc
from .data import Sample
from .decoder import CLAMP, LossConfig, total_loss
from .encoders import EncoderConfig
from .metrics import EvalResult, evaluate_split
from .model import Ablation, ModelInputs, VAGNet
from .tensor import Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"VAGC"
CKPT_VERSION = 1


class TrainConfigError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf; the message names where."""


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 12
    lr0: float = 1e-4
    weight_decay: float = 1e-6
    T: int = 8
    seed: int = 0
    use_mcam: bool = True
    use_stfm: bool = True
    use_proj: bool = True
    img_mode: bool = False
    img_frame: int = 0
    eval_each_epoch: bool = True

    def __post_init__(self):
        for name in ("epochs", "batch_size", "T"):
            if getattr(self, name) <= 0:
                raise TrainConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.lr0 > 0:
            raise TrainConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.weight_decay < 0:
            raise TrainConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if not 0 <= self.img_frame < self.T:
            raise TrainConfigError(f"img_frame {self.img_frame} outside 0..{self.T - 1}")
        self.ablation  # validates the flag combination

    @property
    def ablation(self) -> Ablation:
        return Ablation(self.use_mcam, self.use_stfm, self.use_proj, self.img_mode)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(T=self.T)


# ---------------------------------------------------------------------------
# optimizer + schedule


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
               lr: float, weight_decay: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> dict[str, Tensor]:
    """One AdamW update with decoupled decay; rebinds each ``param.data``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {name} "
                                 f"({int(np.count_nonzero(~np.isfinite(g)))} entries)")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise tc.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m.get(name, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        decayed = p.data - lr * weight_decay * p.data
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data = decayed - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise TrainConfigError(f"step {step} outside 0..{total_steps}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# checkpoints
#
# b"VAGC", u32 version, u32 record count, then per record:
#   u32 name length, utf-8 name, u32 ndim, ndim x u64 dims, f64 payload.
# Names: param/<p>, adam.m/<p>, adam.v/<p>, buffer/<b>, step, config/<field>,
# encoder/<field>.


@dataclass
class Checkpoint:
    model: VAGNet
    config: TrainConfig
    optimizer: AdamState = field(default_factory=AdamState)
    epoch: int = 0


def _records(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    recs: list[tuple[str, np.ndarray]] = []
    for f in dataclasses.fields(ck.config):
        recs.append((f"config/{f.name}", np.asarray(float(getattr(ck.config, f.name)))))
    enc = ck.model.cfg
    for f in dataclasses.fields(enc):
        recs.append((f"encoder/{f.name}", np.asarray(getattr(enc, f.name), dtype=float)))
    recs.append(("step", np.asarray(float(ck.optimizer.step))))
    recs.append(("epoch", np.asarray(float(ck.epoch))))
    for name, p in ck.model.named_parameters().items():
        recs.append((f"param/{name}", p.data))
    for name in ck.optimizer.m:
        recs.append((f"adam.m/{name}", np.asarray(ck.optimizer.m[name])))
        recs.append((f"adam.v/{name}", np.asarray(ck.optimizer.v[name])))
    for name, buf in ck.model.buffers().items():
        recs.append((f"buffer/{name}", buf))
    return recs


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    recs = _records(ck)
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(recs))]
    for name, arr in recs:
        arr = np.asarray(arr, dtype="<f8")  # keeps 0-d records scalar
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_records(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0: {raw[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off, out = 12, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, off)
            name = raw[off + 4: off + 4 + n].decode()
            off += 4 + n
            (ndim,) = struct.unpack_from("<I", raw, off)
            shape = struct.unpack_from(f"<{ndim}Q", raw, off + 4)
            off += 4 + 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 8 * size > len(raw):
                raise CheckpointError(f"{path}: record {name!r} truncated at offset {off}")
            out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header ({exc})") from None
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes at offset {off}")
    return out


def _typed(fields_, recs: dict[str, np.ndarray], prefix: str) -> dict:
    out = {}
    for f in fields_:
        key = f"{prefix}/{f.name}"
        if key not in recs:
            raise CheckpointError(f"missing record {key}")
        val = recs[key]
        kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        if kind.startswith("tuple"):
            out[f.name] = tuple(float(x) for x in val)
        elif kind == "bool":
            out[f.name] = bool(val)
        elif kind == "int":
            out[f.name] = int(val)
        else:
            out[f.name] = float(val)
    return out


def load_checkpoint(path: str | Path) -> Checkpoint:
    recs = read_records(path)
    cfg = TrainConfig(**_typed(dataclasses.fields(TrainConfig), recs, "config"))
    enc = EncoderConfig(**_typed(dataclasses.fields(EncoderConfig), recs, "encoder"))
    model = VAGNet.init(enc, cfg.ablation, seed=cfg.seed)
    model.img_frame = cfg.img_frame
    params = model.named_parameters()
    stored = {k[len("param/"):] for k in recs if k.startswith("param/")}
    if stored != set(params):
        raise CheckpointError(f"parameter names differ: missing {sorted(set(params) - stored)}, "
                              f"unexpected {sorted(stored - set(params))}")
    for name, p in params.items():
        arr = recs[f"param/{name}"]
        if arr.shape != p.shape:
            raise CheckpointError(f"param {name}: stored shape {arr.shape}, model {p.shape}")
        p.data = arr
    for name in model.buffers():
        model.set_buffer(name, recs[f"buffer/{name}"])
    opt = AdamState(step=int(recs["step"]))
    for k, arr in recs.items():
        if k.startswith("adam.m/"):
            opt.m[k[7:]] = arr
        elif k.startswith("adam.v/"):
            opt.v[k[7:]] = arr
    return Checkpoint(model, cfg, opt, epoch=int(recs["epoch"]))


# ---------------------------------------------------------------------------
# training


LOG_COLUMNS = ("epoch", "loss", "lr", "seconds")
EVAL_COLUMNS = tuple(EvalResult(0.0, 0.0, 0.0, 0.0, 0).as_dict())


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    seconds: float
    eval: EvalResult | None = None

    def row(self, with_eval: bool = False) -> str:
        base = f"{self.epoch},{self.loss!r},{self.lr!r},{self.seconds:.3f}"
        if not with_eval:
            return base
        tail = self.eval.csv_row() if self.eval else "," * (len(EVAL_COLUMNS) - 1)
        return base + "," + tail


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochLog]
    step_losses: list[float]


def build_model(cfg: TrainConfig) -> VAGNet:
    model = VAGNet.init(cfg.encoder_config(), cfg.ablation, seed=cfg.seed)
    model.img_frame = cfg.img_frame
    return model


def sample_loss(model: VAGNet, inputs: ModelInputs, sample: Sample, loss_cfg: LossConfig = LossConfig()) -> Tensor:
    pred = model(inputs)
    return total_loss(pred, sample.points.heatmap.reshape(-1, 1), loss_cfg)


def train(cfg: TrainConfig, train_samples: Sequence[Sample], eval_samples: Sequence[Sample] = (),
          out: str | Path | None = None, model: VAGNet | None = None) -> TrainResult:
    """Mini-batch AdamW over ``train_samples``; gradients are averaged per batch.

    With ``out`` the checkpoint is rewritten after every epoch and a CSV log
    goes to ``<out>.log``. A non-finite loss aborts the run; the last written
    checkpoint is the last good state.
    """
    if not train_samples:
        raise TrainConfigError("training split is empty")
    model = model or build_model(cfg)
    model.train()
    params = model.trainable()
    inputs = [model.prepare(s) for s in train_samples]
    rng = np.random.default_rng(cfg.seed)
    n = len(train_samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    ck = Checkpoint(model, cfg)
    history: list[EpochLog] = []
    step_losses: list[float] = []
    log_path = Path(str(out) + ".log") if out is not None else None
    if log_path is not None:
        log_path.write_text(",".join(LOG_COLUMNS + (EVAL_COLUMNS if eval_samples else ())) + "\n")
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            for p in params.values():
                p.zero_grad()
            batch_loss = 0.0
            for i in batch:
                loss = sample_loss(model, inputs[i], train_samples[i])
                if not np.isfinite(loss.item()):
                    where = f" last good checkpoint: {out}" if out is not None and epoch > 1 else ""
                    raise NonFiniteError(f"non-finite loss at epoch {epoch} step {step} "
                                         f"sample {train_samples[i].id};{where}")
                tc.backward(loss)
                batch_loss += loss.item()
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) / len(batch)
                     for k, p in params.items()}
            lr = cosine_lr(step, total, cfg.lr0)
            adamw_step(params, grads, ck.optimizer, lr, cfg.weight_decay)
            step += 1
            step_losses.append(batch_loss / len(batch))
            epoch_loss += batch_loss
        entry = EpochLog(epoch, epoch_loss / n, lr, time.perf_counter() - t0)
        if eval_samples and (cfg.eval_each_epoch or epoch == cfg.epochs):
            model.eval()
            entry.eval = evaluate_split(model, eval_samples)
            model.train()
        history.append(entry)
        ck.epoch = epoch
        log.info("epoch %d loss %.5f lr %.3g%s", epoch, entry.loss, lr,
                 f" aiou {entry.eval.aiou:.2f}" if entry.eval else "")
        if out is not None:
            save_checkpoint(ck, out)
            with log_path.open("a") as fh:
                fh.write(entry.row(with_eval=bool(eval_samples)) + "\n")
    model.eval()
    return TrainResult(ck, history, step_losses)


# ---------------------------------------------------------------------------
# export


def export_heatmap(model, sample: Sample, out_path: str | Path) -> Path:
    """Write ``x,y,z,score`` lines (points-file format) for one sample.

    Scores are clamped into the open unit interval like the loss does.
    """
    predict = getattr(model, "predict", model)
    scores = np.clip(np.asarray(predict(sample), dtype=float).reshape(-1), CLAMP, 1 - CLAMP)
    coords = sample.points.coords
    if scores.shape[0] != coords.shape[0]:
        raise tc.ShapeError(f"{scores.shape[0]} scores for {coords.shape[0]} points")
    lines = [",".join(f"{float(np.float32(v)):.9g}" for v in (*xyz, s)) for xyz, s in zip(coords, scores)]
    out_path = Path(out_path)
    out_path.write_text("\n".join(lines) + "\n")
    return out_path
