"""Sampling policies, the minibatch training loop, and batched inference."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .adpm import ADPMInputs
from .autograd import backward
from .optim import Adam, cosine_lr
from .ranking import PersonalizedRanker, bce_loss

logger = logging.getLogger(__name__)

SAMPLING_MODES = ("balanced_50_50", "keep_half_negatives", "none")


def negative_sample(labels, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Row indices (sorted) kept by a negative-sampling policy.

    ``balanced_50_50`` keeps every positive and as many negatives, drawn
    without replacement; ``keep_half_negatives`` drops each negative with
    probability 0.5; ``none`` keeps everything.
    """
    y = np.asarray(labels).reshape(-1)
    if mode == "none":
        return np.arange(len(y))
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if mode == "balanced_50_50":
        if len(pos) == 0:
            raise ValueError("balanced_50_50 sampling needs at least one positive row")
        keep_neg = rng.choice(neg, size=min(len(pos), len(neg)), replace=False)
    elif mode == "keep_half_negatives":
        keep_neg = neg[rng.random(len(neg)) < 0.5]
    else:
        raise ValueError(f"unknown sampling mode {mode!r}; expected one of {SAMPLING_MODES}")
    return np.sort(np.concatenate([pos, keep_neg]))


@dataclass
class PreparedData:
    """Model-ready arrays for one split."""

    context: np.ndarray
    inputs: ADPMInputs | None
    labels: np.ndarray
    clicked: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, rows) -> "PreparedData":
        return PreparedData(self.context[rows], None if self.inputs is None else self.inputs.take(rows),
                            self.labels[rows], self.clicked[rows])


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 256
    lr_max: float = 0.002
    schedule: str = "cosine"
    max_steps: int | None = None

    def total_steps(self, n_rows: int) -> int:
        steps = self.epochs * math.ceil(n_rows / self.batch_size)
        return steps if self.max_steps is None else min(steps, self.max_steps)


def train_ranker(model: PersonalizedRanker, data: PreparedData, config: TrainConfig,
                 rng: np.random.Generator, on_step: Callable[[int, float], None] | None = None) -> list[float]:
    """Minibatch Adam on mean BCE with per-epoch shuffling; returns per-step losses."""
    if len(data) == 0:
        raise ValueError("no training rows")
    if model.config.task == "pccvr" and not data.clicked.all():
        raise ValueError("PCCVR training rows must all be clicked impressions")
    params = model.parameters()
    frozen = [t.checksum() for t in (model.adpm.frozen_tables() if model.adpm else [])]
    opt = Adam(params, lr_max=config.lr_max)
    total = config.total_steps(len(data))
    losses: list[float] = []
    step = 0
    while step < total:
        order = rng.permutation(len(data))
        for start in range(0, len(data), config.batch_size):
            if step >= total:
                break
            batch = data.take(order[start:start + config.batch_size])
            if model.config.task == "pccvr":
                assert batch.clicked.all()
            opt.zero_grad()
            p = model.forward(batch.context, batch.inputs, training=True, rng=rng)
            loss = bce_loss(p, batch.labels)
            backward(loss)
            lr = cosine_lr(step, total, config.lr_max) if config.schedule == "cosine" else config.lr_max
            opt.step(lr)
            losses.append(loss.item())
            if on_step is not None:
                on_step(step, losses[-1])
            step += 1
    if model.adpm is not None:
        after = [t.checksum() for t in model.adpm.frozen_tables()]
        if after != frozen:
            raise RuntimeError("a frozen pretrained table changed during training")
    return losses


def predict_logits(model: PersonalizedRanker, data: PreparedData, batch_size: int = 1024) -> np.ndarray:
    out = []
    for start in range(0, len(data), batch_size):
        rows = np.arange(start, min(start + batch_size, len(data)))
        batch = data.take(rows)
        out.append(model.logits(batch.context, batch.inputs, training=False).data)
    return np.concatenate(out) if out else np.zeros(0)
