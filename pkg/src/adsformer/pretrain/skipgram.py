"""Listing skip-gram over browsing sessions.

Two output sides are supported. ``hierarchical`` (the default) scores a
context listing as the product of binary decisions along its Huffman
path; ``negative`` keeps one output vector per listing and trains with
sampled negatives, which also gives an exact full-softmax probability.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor
from ..embeddings import EmbeddingTable
from ..sequences import ImpressionData, SyntheticWorld, Vocabulary, entity_id

logger = logging.getLogger(__name__)

MODES = ("hierarchical", "negative")


class EmptyCorpusError(ValueError):
    """The sessions yield no (center, context) pairs."""


class UnknownListingError(KeyError):
    pass


@dataclass
class Session:
    listings: list[int]  # raw listing ids, oldest first
    purchased: bool = False


def sessions_from_impressions(data: ImpressionData, key: str = "listing:view") -> list[Session]:
    """One session per impression: its view sequence in chronological order."""
    purchased = data.lengths.get("listing:purchase", np.zeros(len(data), dtype=np.int64)) > 0
    out = []
    for row, n, bought in zip(data.seq_ids[key], data.lengths[key], purchased):
        out.append(Session([int(v) for v in row[:n][::-1]], bool(bought)))
    return out


def taxonomy_sessions(world: SyntheticWorld, n: int, length: int, rng: np.random.Generator,
                      purchase_rate: float = 0.1) -> list[Session]:
    """Sessions whose listings all share one taxonomy, so co-occurrence never crosses groups."""
    groups = [np.flatnonzero(world.listing_taxonomy == t) for t in range(world.num_taxonomies)]
    groups = [g for g in groups if len(g)]
    out = []
    for _ in range(n):
        g = groups[int(rng.integers(0, len(groups)))]
        out.append(Session(rng.choice(g, size=length).tolist(), bool(rng.random() < purchase_rate)))
    return out


# -- Huffman coding ---------------------------------------------------------
@dataclass
class HuffmanTree:
    """Binary Huffman tree over ``V`` leaves with ``V - 1`` internal nodes.

    ``paths[i]`` lists internal-node indices from the root down to leaf
    ``i``; ``codes[i]`` the branch bits taken. Bit 0 is scored with
    ``sigmoid(v . n)``, bit 1 with ``sigmoid(-v . n)``.
    """

    counts: np.ndarray
    paths: list[np.ndarray] = field(repr=False)
    codes: list[np.ndarray] = field(repr=False)

    @classmethod
    def build(cls, counts: Sequence[int]) -> "HuffmanTree":
        counts = np.asarray(counts, dtype=np.int64)
        V = len(counts)
        if V == 0:
            raise ValueError("Huffman tree needs at least one leaf")
        # heap entries (count, node id); node ids break ties deterministically
        heap = [(int(c), i) for i, c in enumerate(counts)]
        heapq.heapify(heap)
        parent = np.full(2 * V - 1, -1, dtype=np.int64)
        bit = np.zeros(2 * V - 1, dtype=np.int64)
        next_id = V
        while len(heap) > 1:
            c0, n0 = heapq.heappop(heap)
            c1, n1 = heapq.heappop(heap)
            parent[n0], bit[n0] = next_id, 0
            parent[n1], bit[n1] = next_id, 1
            heapq.heappush(heap, (c0 + c1, next_id))
            next_id += 1
        paths, codes = [], []
        for leaf in range(V):
            nodes, bits = [], []
            node = leaf
            while parent[node] >= 0:
                nodes.append(parent[node] - V)
                bits.append(bit[node])
                node = parent[node]
            paths.append(np.array(nodes[::-1], dtype=np.int64))
            codes.append(np.array(bits[::-1], dtype=np.int64))
        return cls(counts, paths, codes)

    @property
    def num_leaves(self) -> int:
        return len(self.counts)

    @property
    def num_internal(self) -> int:
        return self.num_leaves - 1

    def code_lengths(self) -> np.ndarray:
        return np.array([len(c) for c in self.codes], dtype=np.int64)

    def expected_code_length(self) -> float:
        p = self.counts / self.counts.sum()
        return float(np.dot(p, self.code_lengths()))

    def entropy_bits(self) -> float:
        p = self.counts[self.counts > 0] / self.counts.sum()
        return float(-(p * np.log2(p)).sum())

    def padded(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(nodes, signs, mask)`` arrays of shape ``[V, max_depth]``."""
        depth = max(1, int(self.code_lengths().max()))
        V = self.num_leaves
        nodes = np.zeros((V, depth), dtype=np.int64)
        signs = np.zeros((V, depth))
        mask = np.zeros((V, depth), dtype=bool)
        for i, (p, c) in enumerate(zip(self.paths, self.codes)):
            nodes[i, :len(p)] = p
            signs[i, :len(c)] = 1.0 - 2.0 * c
            mask[i, :len(p)] = True
        return nodes, signs, mask


# -- model ------------------------------------------------------------------
@dataclass
class SkipGramConfig:
    dim: int = 64
    window: int = 5
    mode: str = "hierarchical"
    epochs: int = 3
    lr: float = 0.05  # linearly decayed to lr * min_lr_fraction
    min_lr_fraction: float = 1e-4
    batch_size: int = 128
    negatives: int = 5
    purchase_upsample: int = 5

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"skip-gram mode must be one of {MODES}, got {self.mode!r}")
        if self.dim < 1 or self.window < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("dim, window, epochs and batch_size must be positive")
        if self.purchase_upsample < 1:
            raise ValueError("purchase_upsample must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


class SkipGramModel:
    """Input vectors ``v`` plus either a Huffman tree with node vectors or output vectors ``v'``."""

    def __init__(self, ids: Sequence[int], counts: Sequence[int], dim: int, mode: str,
                 rng: np.random.Generator):
        if mode not in MODES:
            raise ValueError(f"skip-gram mode must be one of {MODES}, got {mode!r}")
        self.ids = np.asarray(ids, dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        self.mode, self.dim = mode, dim
        self.row_of = {int(l): i for i, l in enumerate(self.ids)}
        V = len(self.ids)
        self.input_vectors = Tensor(rng.uniform(-0.5 / dim, 0.5 / dim, size=(V, dim)), requires_grad=True,
                                    name="skipgram.input")
        self.tree: HuffmanTree | None = None
        self.node_vectors: Tensor | None = None
        self.output_vectors: Tensor | None = None
        if mode == "hierarchical":
            self.tree = HuffmanTree.build(self.counts)
            self.node_vectors = Tensor(np.zeros((max(V - 1, 0), dim)), requires_grad=True, name="skipgram.nodes")
            self._paths = self.tree.padded()
        else:
            self.output_vectors = Tensor(np.zeros((V, dim)), requires_grad=True, name="skipgram.output")

    @property
    def vocab_size(self) -> int:
        return len(self.ids)

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary([(entity_id("listing", int(l)), int(c)) for l, c in zip(self.ids, self.counts)])

    def parameters(self) -> list[Tensor]:
        return [self.input_vectors, self.node_vectors if self.mode == "hierarchical" else self.output_vectors]

    def row(self, listing) -> int:
        key = int(listing[1:]) if isinstance(listing, str) else int(listing)
        try:
            return self.row_of[key]
        except KeyError:
            raise UnknownListingError(f"listing {listing!r} is not in the skip-gram vocabulary") from None

    def distribution(self, center) -> np.ndarray:
        """``p(. | center)`` over every vocabulary row."""
        v = self.input_vectors.data[self.row(center)]
        if self.mode == "negative":
            scores = self.output_vectors.data @ v
            scores -= scores.max()
            e = np.exp(scores)
            return e / e.sum()
        nodes, signs, mask = self._paths
        if self.vocab_size == 1:
            return np.ones(1)
        logits = self.node_vectors.data[nodes] @ v
        log_p = np.where(mask, -np.logaddexp(0.0, -signs * logits), 0.0).sum(axis=1)
        return np.exp(log_p)

    def to_table(self, num_rows: int | None = None, name: str = "skipgram") -> EmbeddingTable:
        """Frozen table with one row per raw listing id; listings never seen get zeros."""
        num_rows = int(self.ids.max()) + 1 if num_rows is None else num_rows
        weights = np.zeros((num_rows, self.dim))
        keep = self.ids < num_rows
        weights[self.ids[keep]] = self.input_vectors.data[keep]
        return EmbeddingTable.frozen(weights, name=name)


def skipgram_prob(model: SkipGramModel, center, other) -> float:
    """``p(other | center)``: softmax over ``v . v'`` or the product of sigmoids along the Huffman path."""
    i, k = model.row(center), model.row(other)
    v = model.input_vectors.data[i]
    if model.mode == "negative":
        scores = model.output_vectors.data @ v
        m = scores.max()
        return float(np.exp(scores[k] - m) / np.exp(scores - m).sum())
    path, code = model.tree.paths[k], model.tree.codes[k]
    logits = model.node_vectors.data[path] @ v
    return float(np.exp(-np.logaddexp(0.0, -(1.0 - 2.0 * code) * logits).sum()))


# -- losses -----------------------------------------------------------------
def hierarchical_loss(input_vectors: Tensor, node_vectors: Tensor, paths: tuple[np.ndarray, np.ndarray, np.ndarray],
                      centers: np.ndarray, contexts: np.ndarray) -> Tensor:
    """Summed ``-log p(context | center)`` over a batch of pairs."""
    nodes, signs, mask = paths
    vc = ag.take_rows(input_vectors, centers)  # [P, d]
    nv = ag.take_rows(node_vectors, nodes[contexts])  # [P, depth, d]
    logits = ag.tsum(nv * ag.reshape(vc, (vc.shape[0], 1, vc.shape[1])), axis=-1)
    ll = ag.log_sigmoid(logits * signs[contexts])
    return -ag.tsum(ll * mask[contexts].astype(np.float64))


def negative_sampling_loss(input_vectors: Tensor, output_vectors: Tensor, centers: np.ndarray,
                           contexts: np.ndarray, negatives: np.ndarray) -> Tensor:
    """Summed ``-log sigmoid(v.v'_o) - sum log sigmoid(-v.v'_n)`` over a batch of pairs."""
    vc = ag.take_rows(input_vectors, centers)
    pos = ag.tsum(vc * ag.take_rows(output_vectors, contexts), axis=-1)
    neg = ag.tsum(ag.take_rows(output_vectors, negatives) * ag.reshape(vc, (vc.shape[0], 1, vc.shape[1])), axis=-1)
    return -(ag.tsum(ag.log_sigmoid(pos)) + ag.tsum(ag.log_sigmoid(-neg)))


# -- training ---------------------------------------------------------------
def _upsampled(sessions: Iterable[Session], factor: int) -> list[list[int]]:
    out = []
    for s in sessions:
        out.extend([list(s.listings)] * (factor if s.purchased else 1))
    return out


def training_pairs(sequences: Sequence[Sequence[int]], row_of: dict[int, int], window: int) -> tuple[np.ndarray, np.ndarray]:
    """All ``(center, context)`` row pairs with ``0 < |i - j| <= window`` inside each session."""
    flat, sid = [], []
    for s, seq in enumerate(sequences):
        flat.extend(row_of[int(l)] for l in seq)
        sid.extend([s] * len(seq))
    flat = np.asarray(flat, dtype=np.int64)
    sid = np.asarray(sid, dtype=np.int64)
    centers, contexts = [], []
    for off in range(1, window + 1):
        same = sid[off:] == sid[:-off] if len(sid) > off else np.zeros(0, dtype=bool)
        a, b = flat[:-off][same], flat[off:][same]
        centers.extend([a, b])
        contexts.extend([b, a])
    if not centers:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


def fit_skipgram(sessions: Sequence[Session], config: SkipGramConfig, rng: np.random.Generator,
                 on_step: Callable[[int, float], None] | None = None) -> SkipGramModel:
    """Train a skip-gram model; purchase sessions are repeated ``purchase_upsample`` times.

    The vocabulary and Huffman counts are taken after upsampling.
    """
    config.validate()
    seqs = _upsampled(sessions, config.purchase_upsample)
    tokens = np.concatenate([np.asarray(s, dtype=np.int64) for s in seqs]) if seqs else np.zeros(0, np.int64)
    if tokens.size == 0:
        raise EmptyCorpusError("skip-gram corpus is empty")
    uniq, counts = np.unique(tokens, return_counts=True)
    order = np.lexsort((uniq, -counts))
    ids, counts = uniq[order], counts[order]
    model = SkipGramModel(ids, counts, config.dim, config.mode, rng)
    centers, contexts = training_pairs(seqs, model.row_of, config.window)
    if centers.size == 0:
        raise EmptyCorpusError("no (center, context) pairs: every session has fewer than two listings")
    noise = counts.astype(np.float64) ** 0.75
    noise /= noise.sum()
    total = config.epochs * math.ceil(len(centers) / config.batch_size)
    step = 0
    params = model.parameters()
    for _ in range(config.epochs):
        perm = rng.permutation(len(centers))
        for start in range(0, len(perm), config.batch_size):
            rows = perm[start:start + config.batch_size]
            c, o = centers[rows], contexts[rows]
            for p in params:
                p.grad = None
            if config.mode == "hierarchical":
                loss = hierarchical_loss(model.input_vectors, model.node_vectors, model._paths, c, o)
            else:
                neg = rng.choice(len(ids), size=(len(rows), config.negatives), p=noise)
                loss = negative_sampling_loss(model.input_vectors, model.output_vectors, c, o, neg)
            ag.backward(loss)
            lr = config.lr * max(1.0 - step / total, config.min_lr_fraction)
            for p in params:
                if p.grad is not None:
                    p.data -= lr * p.grad
            if on_step is not None:
                on_step(step, loss.item() / len(rows))
            step += 1
    return model


def train_skipgram(sessions: Sequence[Session], config: SkipGramConfig, rng: np.random.Generator,
                   num_rows: int | None = None) -> EmbeddingTable:
    """Frozen ``dim``-wide table (one row per raw listing id) from :func:`fit_skipgram`."""
    return fit_skipgram(sessions, config, rng).to_table(num_rows)


def group_cosine_gap(vectors: np.ndarray, groups: np.ndarray) -> tuple[float, float]:
    """Mean within-group and cross-group cosine similarity over distinct row pairs."""
    v = vectors / np.maximum(np.linalg.norm(vectors, axis=1, keepdims=True), 1e-12)
    sim = v @ v.T
    same = groups[:, None] == groups[None, :]
    off = ~np.eye(len(v), dtype=bool)
    return float(sim[same & off].mean()), float(sim[~same].mean())
