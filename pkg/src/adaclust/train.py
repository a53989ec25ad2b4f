"""Teacher-forced cross-entropy training and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import Dropout
from .model import PAD, CaptionerModel, cross_entropy, greedy_decode
from .optim import Adam, step_decay_lr
from .rng import SplitMix64
from .scenes import ToySample, batch_arrays

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    """Loss or gradients became NaN/Inf."""


def _first_non_finite(model: CaptionerModel) -> Optional[str]:
    for name, p in model.parameters().items():
        if not np.all(np.isfinite(p.data)):
            return f"{name} (value)"
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return f"{name} (gradient)"
    return None


def batch_loss(model: CaptionerModel, samples: Sequence[ToySample], drop: Optional[Dropout] = None) -> T.Tensor:
    feats, inputs, targets = batch_arrays(samples, model.config.max_caption_len)
    logits = model.forward(feats, inputs, drop)
    return cross_entropy(logits, targets, PAD)


def train_step(
    model: CaptionerModel,
    samples: Sequence[ToySample],
    optimizer: Adam,
    lr: Optional[float] = None,
) -> float:
    """One Adam update on the batch; returns the loss measured before the update.

    With dropout enabled the returned loss is the dropped-out training loss,
    with masks drawn from ``(model seed, optimizer step)``.
    """
    if not samples:
        raise ValueError("empty batch")
    model.zero_grad()
    with T.Tape() as tape:
        loss = batch_loss(model, samples, model.dropout(optimizer.step_count))
        value = loss.item()
        if not np.isfinite(value):
            culprit = _first_non_finite(model) or "loss"
            raise NonFiniteError(f"non-finite loss {value}; first non-finite tensor: {culprit}")
        tape.backward(loss)
    culprit = _first_non_finite(model)
    if culprit is not None:
        raise NonFiniteError(f"non-finite gradient; first non-finite tensor: {culprit}")
    optimizer.step(model.parameters(), lr=lr)
    return value


@dataclass
class EvalResult:
    loss: float
    token_accuracy: float
    exact_match: float


def evaluate(model: CaptionerModel, samples: Sequence[ToySample], batch_size: int = 50) -> EvalResult:
    """Teacher-forced CE and token accuracy, plus greedy exact-match."""
    n_tok = correct = 0
    loss_sum = 0.0
    exact = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start: start + batch_size]
        feats, inputs, targets = batch_arrays(chunk, model.config.max_caption_len)
        memory, _ = model.encode(feats)
        logits, _ = model.decode_teacher_forced(memory, inputs)
        loss_sum += cross_entropy(logits, targets, PAD).item() * len(chunk)
        keep = targets != PAD
        pred = logits.data.argmax(axis=-1)
        correct += int((pred == targets)[keep].sum())
        n_tok += int(keep.sum())
        for sample, out in zip(chunk, greedy_decode(model, feats)):
            if list(sample.caption[1:-1]) == out:
                exact += 1
    return EvalResult(loss_sum / len(samples), correct / n_tok, exact / len(samples))


@dataclass
class FitConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.8
    lr_decay_every: int = 5
    shuffle_seed: int = 0
    eval_every: int = 1  # the last epoch is always evaluated


def fit(
    model: CaptionerModel,
    train: Sequence[ToySample],
    val: Sequence[ToySample],
    cfg: FitConfig,
    optimizer: Optional[Adam] = None,
    start_epoch: int = 0,
    on_epoch: Optional[Callable[[int, float, Optional[EvalResult], Adam], None]] = None,
) -> list[tuple[int, float, Optional[EvalResult]]]:
    """Train for ``cfg.epochs`` epochs from ``start_epoch``; returns per-epoch metrics.

    Epochs skipped by ``cfg.eval_every`` report ``None`` in place of an
    ``EvalResult``.
    """
    optimizer = optimizer or Adam(lr=cfg.lr)
    history = []
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        lr = step_decay_lr(cfg.lr, epoch, cfg.lr_decay, cfg.lr_decay_every)
        order = _permutation(len(train), cfg.shuffle_seed, epoch)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[start: start + cfg.batch_size]]
            losses.append(train_step(model, batch, optimizer, lr=lr))
        train_ce = float(np.mean(losses))
        last = epoch == start_epoch + cfg.epochs - 1
        if last or (epoch - start_epoch + 1) % max(cfg.eval_every, 1) == 0:
            result = evaluate(model, val)
            log.info("epoch %d lr %.2e train %.4f val %.4f tok %.3f exact %.3f",
                     epoch, lr, train_ce, result.loss, result.token_accuracy, result.exact_match)
        else:
            result = None
            log.info("epoch %d lr %.2e train %.4f", epoch, lr, train_ce)
        history.append((epoch, train_ce, result))
        if on_epoch is not None:
            on_epoch(epoch, train_ce, result, optimizer)
    return history


def _permutation(n: int, seed: int, epoch: int) -> list[int]:
    rng = SplitMix64((seed << 20) ^ epoch)
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.randint(0, i)
        order[i], order[j] = order[j], order[i]
    return order
