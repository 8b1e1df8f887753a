"""Losses, Adam, reduce-on-plateau schedule and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .network import SegNetwork, forward, save_checkpoint

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# losses


def soft_dice_loss(probs: Tensor, labels: Tensor, eps: float = 1e-5) -> Tensor:
    """Mean over region channels of ``1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)``."""
    if probs.shape != labels.shape:
        raise ValueError(f"dice loss: probs {probs.shape} and labels {labels.shape} differ")
    if eps <= 0:
        raise ValueError(f"dice eps must be positive, got {eps}")
    n = probs.data[0].size
    inter = ad.scale(ad.global_avg_pool(ad.mul(probs, labels)), float(n))
    sum_p = ad.scale(ad.global_avg_pool(probs), float(n))
    sum_y = ad.scale(ad.global_avg_pool(labels), float(n))
    num = ad.add(ad.scale(inter, 2.0), _const(eps, probs))
    den = ad.add(ad.add(sum_p, sum_y), _const(eps, probs))
    dice = ad.div(num, den)
    return ad.sub(_const(1.0, probs), ad.mean(dice))


def _const(value: float, like: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=like.dtype), dtype=like.dtype)


def correlation_l1_loss(cr_features: Sequence[Tensor], encoder_features: Sequence[Tensor]) -> Tensor:
    """Mean absolute difference between each correlation representation and its encoder feature."""
    if len(cr_features) != len(encoder_features) or not cr_features:
        raise ValueError("correlation L1 needs matching, nonempty feature lists")
    terms = []
    for F, f in zip(cr_features, encoder_features):
        if F.shape != f.shape:
            raise ValueError(f"correlation L1: shapes {F.shape} and {f.shape} differ")
        terms.append(ad.mean(ad.absolute(ad.sub(F, f))))
    return ad.mean(ad.stack_scalars(terms))


@dataclass
class LossBreakdown:
    total: float
    dice: float
    l1: float


def total_loss(out, labels: Tensor, dice_eps: float = 1e-5) -> tuple[Tensor, LossBreakdown]:
    """Dice loss plus the correlation L1 term (zero when the CR block is off)."""
    dice = soft_dice_loss(out.probs, labels, dice_eps)
    if out.cr_features:
        l1 = correlation_l1_loss(out.cr_features, out.encoder_features)
        loss = ad.add(dice, l1)
        l1_value = float(l1.data)
    else:
        loss = dice
        l1_value = 0.0
    return loss, LossBreakdown(float(loss.data), float(dice.data), l1_value)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: OptimizerState, params: Sequence[Parameter], grads: Sequence[np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update, in place. ``grads`` defaults to each ``p.grad``."""
    if grads is None:
        grads = [p.grad for p in params]
    for p, g in zip(params, grads):
        if g is None or not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for p, g in zip(params, grads):
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)).astype(p.dtype)
        p.data -= update


@dataclass
class ScheduleState:
    factor: float = 0.5
    patience: int = 10
    max_epochs: int = 50
    threshold: float = 1e-6
    best_loss: float = math.inf
    epochs_since_improve: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError(f"schedule factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ValueError(f"schedule patience must be >= 1, got {self.patience}")


def lr_update(schedule: ScheduleState, state: OptimizerState, epoch_loss: float) -> None:
    """Halve the learning rate after ``patience`` epochs without improvement."""
    if epoch_loss < schedule.best_loss - schedule.threshold:
        schedule.best_loss = epoch_loss
        schedule.epochs_since_improve = 0
        return
    schedule.epochs_since_improve += 1
    if schedule.epochs_since_improve >= schedule.patience:
        state.lr *= schedule.factor
        schedule.epochs_since_improve = 0
        log.info("plateau: learning rate reduced to %.3g", state.lr)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainingConfig:
    lr: float = 5e-4
    max_epochs: int = 50
    patience: int = 10
    factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dice_eps: float = 1e-5
    seed: int = 42
    modality_dropout: bool = False


@dataclass
class EpochRecord:
    epoch: int
    total: float
    dice: float
    l1: float
    lr: float


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.epochs)

    def write_csv(self, path) -> None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["epoch", "total", "dice", "l1", "lr"])
                for r in self.epochs:
                    w.writerow([r.epoch, f"{r.total:.6f}", f"{r.dice:.6f}", f"{r.l1:.6f}", f"{r.lr:.6g}"])
        except OSError as exc:
            raise OSError(f"cannot write training log {path}: {exc}") from exc


def _dropout_mask(rng: np.random.Generator) -> list[bool]:
    while True:
        mask = list(rng.random(4) >= 0.25)
        if any(mask):
            return mask


def train_step(net: SegNetwork, opt: OptimizerState, sample, cfg: TrainingConfig, mask=None) -> LossBreakdown:
    params = net.parameters()
    for p in params:
        p.zero_grad()
    out = forward(net, sample.volumes, mask)
    loss, parts = total_loss(out, sample.labels, cfg.dice_eps)
    if not math.isfinite(parts.total):
        raise FloatingPointError("non-finite loss")
    ad.backward(loss)
    adam_step(opt, params)
    return parts


def train(net: SegNetwork, dataset: Sequence, config: TrainingConfig | None = None, out_dir=None) -> TrainingLog:
    """Train on every sample once per epoch in seeded random order.

    When ``out_dir`` is given, the best epoch's model goes to ``out_dir/best``,
    the final model to ``out_dir/last`` and the log to ``out_dir/train_log.csv``.
    """
    cfg = config or TrainingConfig()
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    sched = ScheduleState(factor=cfg.factor, patience=cfg.patience, max_epochs=cfg.max_epochs)
    history = TrainingLog()
    best = math.inf
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(dataset))
        sums = np.zeros(3)
        lr_used = opt.lr
        for k in order:
            mask = _dropout_mask(rng) if cfg.modality_dropout else None
            try:
                parts = train_step(net, opt, dataset[k], cfg, mask)
            except FloatingPointError as exc:
                raise FloatingPointError(f"epoch {epoch}, sample {int(k)}: {exc}") from exc
            sums += (parts.total, parts.dice, parts.l1)
        total, dice, l1 = sums / len(dataset)
        history.epochs.append(EpochRecord(epoch, total, dice, l1, lr_used))
        log.info("epoch %d total %.4f dice %.4f l1 %.4f lr %.3g", epoch, total, dice, l1, lr_used)
        if total < best:
            best = total
            history.best_epoch = epoch
            if out_dir is not None:
                save_checkpoint(net, Path(out_dir) / "best", epoch)
        lr_update(sched, opt, total)
    if out_dir is not None:
        save_checkpoint(net, Path(out_dir) / "last", cfg.max_epochs - 1)
        history.write_csv(Path(out_dir) / "train_log.csv")
    return history
