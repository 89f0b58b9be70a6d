"""AIR listing representations: a weight-shared encoder trained on co-click pairs.

Source and candidate listings go through the same encoder. Each batch
yields a cosine-similarity matrix between source and candidate encodings;
row ``i`` is a softmax classification whose positive class is column ``i``
and whose negatives are (a sample of) the other candidates in the batch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor
from ..embeddings import EmbeddingTable
from ..optim import Adam
from ..rng import stream
from ..sequences import SyntheticWorld

logger = logging.getLogger(__name__)

VISUAL_DIM = 256
TEXT_DIM = 256
NUM_SCALARS = 4
EXCLUDED_LOGIT = -1e9


def content_features(world: SyntheticWorld, seed: int, nuisance: float = 2.5) -> np.ndarray:
    """Synthetic frozen visual (256), text (256) and scalar features per listing.

    Each block is a random projection of the listing attributes plus
    listing-specific nuisance noise that carries no co-click information.
    """
    rng = stream(seed, "content-features")
    attrs = world.listing_attrs
    L, d = attrs.shape
    blocks = []
    for width in (VISUAL_DIM, TEXT_DIM, NUM_SCALARS):
        proj = rng.normal(size=(d, width)) / math.sqrt(d)
        blocks.append(attrs @ proj + nuisance * rng.normal(size=(L, width)))
    return np.concatenate(blocks, axis=1)


def co_click_pairs(world: SyntheticWorld, n: int, rng: np.random.Generator, neighbors: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """``(source, candidate)`` listing pairs: the candidate is one of the source's nearest same-taxonomy listings."""
    attrs = world.listing_attrs
    tax = world.listing_taxonomy
    near = []
    for i in range(world.num_listings):
        pool = np.flatnonzero((tax == tax[i]) & (np.arange(world.num_listings) != i))
        if len(pool) == 0:
            near.append(np.array([i]))
            continue
        dist = np.linalg.norm(attrs[pool] - attrs[i], axis=1)
        near.append(pool[np.argsort(dist, kind="stable")[:neighbors]])
    src = rng.integers(0, world.num_listings, size=n)
    cand = np.array([near[s][rng.integers(0, len(near[s]))] for s in src], dtype=np.int64)
    return src.astype(np.int64), cand


class AirModel:
    """Shared affine stack: input features to a hidden LeakyReLU layer to the output representation."""

    def __init__(self, input_dim: int, rng: np.random.Generator, hidden: int = 256, output_dim: int = 256,
                 leaky_slope: float = 0.2):
        def glorot(fan_in, fan_out, name):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            return Tensor(rng.uniform(-lim, lim, size=(fan_in, fan_out)), requires_grad=True, name=name)

        self.input_dim, self.output_dim, self.leaky_slope = input_dim, output_dim, leaky_slope
        self.W1 = glorot(input_dim, hidden, "air.W1")
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True, name="air.b1")
        self.W2 = glorot(hidden, output_dim, "air.W2")
        self.b2 = Tensor(np.zeros(output_dim), requires_grad=True, name="air.b2")

    def parameters(self) -> list[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]

    def encode(self, features) -> Tensor:
        x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64))
        if x.shape[-1] != self.input_dim:
            raise ag.ShapeError(f"AIR encoder expects {self.input_dim} input features, got {x.shape[-1]}")
        h = ag.leaky_relu(ag.matmul(x, self.W1) + self.b1, self.leaky_slope)
        return ag.matmul(h, self.W2) + self.b2


def cosine_matrix(source: Tensor, candidate: Tensor) -> Tensor:
    """``C[i, j] = cos(source_i, candidate_j)``."""
    return ag.matmul(ag.l2_normalize(source), ag.transpose(ag.l2_normalize(candidate)))


def negative_mask(batch: int, num_negatives: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Boolean ``[batch, batch]`` mask of scored columns: the diagonal plus ``num_negatives`` others per row."""
    if batch < 2:
        raise ValueError("in-batch softmax needs a batch of at least 2")
    if not 0 <= num_negatives <= batch - 1:
        raise ValueError(f"num_negatives must lie in [0, {batch - 1}], got {num_negatives}")
    if num_negatives == batch - 1:
        return np.ones((batch, batch), dtype=bool)
    if rng is None:
        raise ValueError("sampling a subset of negatives needs an rng")
    mask = np.eye(batch, dtype=bool)
    for i in range(batch):
        others = np.delete(np.arange(batch), i)
        mask[i, rng.choice(others, size=num_negatives, replace=False)] = True
    return mask


def in_batch_softmax_loss(C: Tensor, mask: np.ndarray, temperature: float = 1.0) -> Tensor:
    """Mean over rows of ``-log softmax(C[i] / temperature)[i]`` restricted to the masked columns."""
    C = C if isinstance(C, Tensor) else Tensor(np.asarray(C, dtype=np.float64))
    logits = C * (1.0 / temperature) + np.where(mask, 0.0, EXCLUDED_LOGIT)
    diag = np.eye(C.shape[0])
    return -ag.tsum(ag.log_softmax(logits, axis=-1) * diag) * (1.0 / C.shape[0])


def air_batch_loss(model: AirModel, source_features, candidate_features, num_negatives: int,
                   rng: np.random.Generator | None = None, temperature: float = 1.0) -> Tensor:
    B = np.asarray(source_features.data if isinstance(source_features, Tensor) else source_features).shape[0]
    mask = negative_mask(B, num_negatives, rng)
    C = cosine_matrix(model.encode(source_features), model.encode(candidate_features))
    return in_batch_softmax_loss(C, mask, temperature)


@dataclass
class AirConfig:
    batch_size: int = 256
    num_negatives: int | None = None  # None: every other example in the batch
    epochs: int = 5
    lr: float = 0.002
    temperature: float = 1.0
    hidden: int = 256
    dim: int = 256

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("AIR batch_size must be at least 2")
        if self.num_negatives is not None and not 0 <= self.num_negatives <= self.batch_size - 1:
            raise ValueError(f"num_negatives must lie in [0, {self.batch_size - 1}]")
        if self.epochs < 1 or self.lr <= 0 or self.temperature <= 0:
            raise ValueError("epochs, lr and temperature must be positive")


def fit_air(features: np.ndarray, pairs: tuple[np.ndarray, np.ndarray], config: AirConfig,
            rng: np.random.Generator, on_step: Callable[[int, float], None] | None = None) -> AirModel:
    """Adam on the in-batch softmax loss; the last partial batch is dropped."""
    config.validate()
    src, cand = (np.asarray(a, dtype=np.int64) for a in pairs)
    if len(src) < config.batch_size:
        raise ValueError(f"need at least {config.batch_size} pairs, got {len(src)}")
    model = AirModel(features.shape[1], rng, config.hidden, config.dim)
    opt = Adam(model.parameters(), lr_max=config.lr)
    negatives = config.batch_size - 1 if config.num_negatives is None else config.num_negatives
    step = 0
    for _ in range(config.epochs):
        perm = rng.permutation(len(src))
        for start in range(0, len(perm) - config.batch_size + 1, config.batch_size):
            rows = perm[start:start + config.batch_size]
            opt.zero_grad()
            loss = air_batch_loss(model, features[src[rows]], features[cand[rows]], negatives, rng,
                                  config.temperature)
            ag.backward(loss)
            opt.step()
            if on_step is not None:
                on_step(step, loss.item())
            step += 1
    return model


def unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def infer_table(model: AirModel, features: np.ndarray, batch_size: int = 1024, name: str = "air") -> EmbeddingTable:
    """Frozen table of every listing's encoding, computed in batches.

    Rows are unit length: training only ever sees cosines, so the norm
    carries nothing and would otherwise dominate the ranker's input scale.
    """
    out = [model.encode(features[i:i + batch_size]).data for i in range(0, len(features), batch_size)]
    return EmbeddingTable.frozen(unit_rows(np.concatenate(out, axis=0)), name=name)


def train_air(features: np.ndarray, pairs: tuple[np.ndarray, np.ndarray], config: AirConfig,
              rng: np.random.Generator) -> EmbeddingTable:
    return infer_table(fit_air(features, pairs, config, rng), features)


def retrieval_accuracy(model: AirModel, features: np.ndarray, pairs: tuple[np.ndarray, np.ndarray],
                       batch_size: int = 64) -> float:
    """Share of rows whose highest cosine lands on their own candidate, over consecutive batches."""
    src, cand = pairs
    hits = total = 0
    for start in range(0, len(src) - batch_size + 1, batch_size):
        rows = slice(start, start + batch_size)
        C = cosine_matrix(model.encode(features[src[rows]]), model.encode(features[cand[rows]])).data
        hits += int((C.argmax(axis=1) == np.arange(batch_size)).sum())
        total += batch_size
    if total == 0:
        raise ValueError(f"need at least {batch_size} pairs to score retrieval")
    return hits / total
