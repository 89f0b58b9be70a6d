"""The adSformer block and the three-component personalization module (ADPM).

Component one encodes one (entity, action) sequence with adSformer blocks
(target listing prepended at position 0, learned positions, multi-head
self-attention, LeakyReLU feed-forward, global pooling). Component two
average-pools frozen pretrained listing vectors. Component three
average-pools small trainable tables, one per (entity, action) sequence.
The user representation ``u`` concatenates whatever components are enabled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .embeddings import FLAVOR_DIMS, EmbeddingTable, PretrainedBundle, avg_pool_sequence, lookup
from .sequences import (EntityKind, ImpressionData, PaddedBatch, Vocabulary, pad_index_matrix,
                        parse_seq_key, seq_key)

MASK_LOGIT = -1e9


class ADPMConfigError(ValueError):
    """The module configuration is inconsistent with itself or its inputs."""


LISTING_KEYS = ("listing:view", "listing:favorite", "listing:cart_add", "listing:purchase")


def default_component3_specs(dims: Mapping[str, int] | None = None,
                            actions: Sequence[str] = ("favorite", "cart_add", "purchase")
                            ) -> list[tuple[str, str, int]]:
    """Learned (entity, action, dim) tables: listing 32, shop 16, taxonomy 8 per action."""
    dims = dims or {"listing": 32, "shop": 16, "taxonomy": 8}
    return [(kind, action, int(dim)) for action in actions for kind, dim in dims.items()]


@dataclass
class ADPMConfig:
    use_component1: bool = True
    use_component2: bool = True
    use_component3: bool = True
    pooling_mode: str = "max"
    pretrained_flavors: tuple[str, ...] = ("air",)
    component3_specs: list[tuple[str, str, int]] = field(default_factory=default_component3_specs)
    encoder_key: str = "listing:view"
    component2_keys: tuple[str, ...] = LISTING_KEYS
    num_heads: int = 3
    head_dim: int | None = None
    d1: int = 32
    num_blocks: int = 1
    dropout: float = 0.0
    ffn_multiplier: int = 4
    leaky_slope: float = 0.2
    max_len: int = 50
    include_target_in_pool: bool = True
    embedding_init_std: float | None = 0.05  # trainable tables; None means 1/sqrt(dim)
    vocab_sizes: dict[str, int] = field(default_factory=dict)

    def validate(self) -> None:
        if not (self.use_component1 or self.use_component2 or self.use_component3):
            raise ADPMConfigError("at least one ADPM component must be enabled")
        if self.pooling_mode not in ("max", "avg"):
            raise ADPMConfigError(f"pooling_mode must be 'max' or 'avg', got {self.pooling_mode!r}")
        if self.num_heads < 1 or self.d1 < 1 or self.num_blocks < 1 or self.max_len < 1:
            raise ADPMConfigError("num_heads, d1, num_blocks and max_len must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ADPMConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.use_component2:
            if not self.pretrained_flavors:
                raise ADPMConfigError("component two needs at least one pretrained flavor")
            unknown = set(self.pretrained_flavors) - set(FLAVOR_DIMS)
            if unknown:
                raise ADPMConfigError(f"unknown pretrained flavors {sorted(unknown)}")
            if len(set(self.pretrained_flavors)) != len(self.pretrained_flavors):
                raise ADPMConfigError("duplicate pretrained flavor")
        if self.use_component3:
            if not self.component3_specs:
                raise ADPMConfigError("component three needs at least one (entity, action, dim) spec")
            for kind, action, dim in self.component3_specs:
                seq_key(kind, action)
                if dim < 1:
                    raise ADPMConfigError(f"component three dim for {kind}:{action} must be positive")
        if self.use_component1 and parse_seq_key(self.encoder_key)[0] is not EntityKind.LISTING:
            raise ADPMConfigError("the adSformer encoder consumes a listing sequence")

    @property
    def resolved_head_dim(self) -> int:
        if self.head_dim is not None:
            return self.head_dim
        return math.ceil(self.d1 / self.num_heads)

    def component_widths(self) -> dict[str, int]:
        widths = {}
        if self.use_component1:
            widths["o1"] = self.d1
        if self.use_component2:
            widths["o2"] = sum(FLAVOR_DIMS[f] for f in self.pretrained_flavors)
        if self.use_component3:
            widths["o3"] = sum(dim for _, _, dim in self.component3_specs)
        return widths

    @property
    def output_dim(self) -> int:
        return sum(self.component_widths().values())

    def required_keys(self) -> list[str]:
        keys: list[str] = []
        if self.use_component1:
            keys.append(self.encoder_key)
        if self.use_component2:
            keys.extend(self.component2_keys)
        if self.use_component3:
            keys.extend(seq_key(k, a) for k, a, _ in self.component3_specs)
        return list(dict.fromkeys(keys))


@dataclass
class ADPMInputs:
    """Vocabulary-indexed model inputs for one batch."""

    target: np.ndarray  # [batch] listing vocabulary indices
    sequences: dict[str, PaddedBatch]

    def __len__(self) -> int:
        return int(self.target.shape[0])

    def take(self, rows) -> "ADPMInputs":
        return ADPMInputs(self.target[rows], {k: b.take(rows) for k, b in self.sequences.items()})


@dataclass
class ADPMOutput:
    o1: Tensor | None
    o2: Tensor | None
    o3: Tensor | None
    u: Tensor


def encode_inputs(data: ImpressionData, vocabs: Mapping[str, Vocabulary], num_entities: Mapping[str, int],
                  keys: Sequence[str] | None = None) -> ADPMInputs:
    """Map raw impression columns to vocabulary indices and masks."""
    lookups = {kind: vocabs[kind].lookup_array(kind, n) for kind, n in num_entities.items() if kind in vocabs}
    target = lookups["listing"][data.candidates]
    batches = {}
    for key in keys or data.keys:
        kind = parse_seq_key(key)[0].value
        batches[key] = pad_index_matrix(data.seq_ids[key], data.lengths[key], lookups[kind])
    return ADPMInputs(target, batches)


class AdsformerBlock:
    """One transformer block: MHSA and LeakyReLU-FFN sublayers with residual, dropout, layer norm."""

    def __init__(self, d1: int, num_heads: int, head_dim: int, ffn_multiplier: int,
                 dropout: float, leaky_slope: float, rng: np.random.Generator, name: str = "block"):
        self.d1, self.num_heads, self.head_dim = d1, num_heads, head_dim
        self.dropout, self.leaky_slope = dropout, leaky_slope
        inner = num_heads * head_dim
        d_ffn = ffn_multiplier * d1

        def glorot(fan_in, fan_out, label):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            return Tensor(rng.uniform(-lim, lim, size=(fan_in, fan_out)), requires_grad=True,
                          name=f"{name}.{label}")

        self.W_q = glorot(d1, inner, "W_q")
        self.W_k = glorot(d1, inner, "W_k")
        self.W_v = glorot(d1, inner, "W_v")
        self.W_h = glorot(inner, d1, "W_h")
        self.ffn_w1 = glorot(d1, d_ffn, "ffn_w1")
        self.ffn_b1 = Tensor(np.zeros(d_ffn), requires_grad=True, name=f"{name}.ffn_b1")
        self.ffn_w2 = glorot(d_ffn, d1, "ffn_w2")
        self.ffn_b2 = Tensor(np.zeros(d1), requires_grad=True, name=f"{name}.ffn_b2")
        self.ln1_gain = Tensor(np.ones(d1), requires_grad=True, name=f"{name}.ln1_gain")
        self.ln1_bias = Tensor(np.zeros(d1), requires_grad=True, name=f"{name}.ln1_bias")
        self.ln2_gain = Tensor(np.ones(d1), requires_grad=True, name=f"{name}.ln2_gain")
        self.ln2_bias = Tensor(np.zeros(d1), requires_grad=True, name=f"{name}.ln2_bias")

    def parameters(self) -> list[Tensor]:
        return [self.W_q, self.W_k, self.W_v, self.W_h, self.ffn_w1, self.ffn_b1, self.ffn_w2,
                self.ffn_b2, self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias]

    def __call__(self, x: Tensor, mask: np.ndarray, training: bool,
                 rng: np.random.Generator | None = None) -> Tensor:
        attn = mhsa(x, mask, self.W_q, self.W_k, self.W_v, self.W_h, self.num_heads, self.head_dim)
        x = ag.layer_norm(x + ag.dropout(attn, self.dropout, training, rng), self.ln1_gain, self.ln1_bias)
        h = ag.leaky_relu(x, self.leaky_slope)
        h = ag.matmul(h, self.ffn_w1) + self.ffn_b1
        h = ag.matmul(h, self.ffn_w2) + self.ffn_b2
        return ag.layer_norm(x + ag.dropout(h, self.dropout, training, rng), self.ln2_gain, self.ln2_bias)


def mhsa(x: Tensor, mask: np.ndarray, W_q: Tensor, W_k: Tensor, W_v: Tensor, W_h: Tensor,
         num_heads: int, head_dim: int) -> Tensor:
    """Multi-head scaled dot-product self-attention over ``x`` of shape ``[batch, P, d]``.

    Keys at masked positions get a -1e9 additive logit. Heads are
    concatenated and projected back to ``d`` by ``W_h``.
    """
    B, P, _ = x.shape

    def heads(t: Tensor) -> Tensor:
        return ag.transpose(ag.reshape(t, (B, P, num_heads, head_dim)), (0, 2, 1, 3))

    q = heads(ag.matmul(x, W_q))
    k = heads(ag.matmul(x, W_k))
    v = heads(ag.matmul(x, W_v))
    scores = ag.matmul(q, ag.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(head_dim))
    key_bias = np.where(np.asarray(mask, dtype=bool), 0.0, MASK_LOGIT)[:, None, None, :]
    weights = ag.softmax(scores + key_bias, axis=-1)
    ctx = ag.transpose(ag.matmul(weights, v), (0, 2, 1, 3))
    return ag.matmul(ag.reshape(ctx, (B, P, num_heads * head_dim)), W_h)


class AdsformerEncoder:
    """Component one: listing embedding + learned positions, adSformer blocks, global pooling."""

    def __init__(self, config: ADPMConfig, vocab_size: int, rng: np.random.Generator):
        self.config = config
        d1 = config.d1
        self.listing_table = EmbeddingTable.random(vocab_size, d1, rng, name="c1.listing",
                                                    std=config.embedding_init_std)
        self.position_table = EmbeddingTable.random(config.max_len + 1, d1, rng, name="c1.position", std=0.02)
        self.blocks = [AdsformerBlock(d1, config.num_heads, config.resolved_head_dim, config.ffn_multiplier,
                                      config.dropout, config.leaky_slope, rng, name=f"c1.block{i}")
                       for i in range(config.num_blocks)]

    def parameters(self) -> list[Tensor]:
        params = [self.listing_table.weights, self.position_table.weights]
        for block in self.blocks:
            params.extend(block.parameters())
        return params

    def __call__(self, target: np.ndarray, seq: PaddedBatch, training: bool,
                 rng: np.random.Generator | None = None) -> Tensor:
        B, M = seq.indices.shape
        if M > self.config.max_len:
            raise ADPMConfigError(f"sequence length {M} exceeds configured max_len {self.config.max_len}")
        idx = np.concatenate([np.asarray(target, dtype=np.int64)[:, None], seq.indices], axis=1)
        mask = np.concatenate([np.ones((B, 1), dtype=bool), seq.mask], axis=1)
        x = lookup(self.listing_table, idx) + ag.take_rows(self.position_table.weights, np.arange(M + 1))
        for block in self.blocks:
            x = block(x, mask, training, rng)
        pool_mask = mask if self.config.include_target_in_pool else np.concatenate(
            [np.zeros((B, 1), dtype=bool), seq.mask], axis=1)
        if self.config.pooling_mode == "max":
            return ag.global_max_pool(x, pool_mask)
        return ag.global_avg_pool(x, pool_mask)


class ADPM:
    """Personalization module producing ``u = concat(o1, o2, o3)``."""

    def __init__(self, config: ADPMConfig, rng: np.random.Generator,
                 pretrained: PretrainedBundle | None = None):
        config.validate()
        self.config = config
        self.encoder = None
        self.component3: dict[str, EmbeddingTable] = {}
        self.pretrained = pretrained or PretrainedBundle()
        vs = config.vocab_sizes
        if config.use_component1:
            self.encoder = AdsformerEncoder(config, self._vocab_size("listing"), rng)
        if config.use_component2:
            for flavor in config.pretrained_flavors:
                if flavor not in self.pretrained:
                    raise ADPMConfigError(f"pretrained flavor {flavor!r} is configured but no table was provided")
                table = self.pretrained[flavor]
                if "listing" in vs and table.vocab_size != vs["listing"]:
                    raise ADPMConfigError(f"{flavor} table has {table.vocab_size} rows, listing vocabulary "
                                          f"has {vs['listing']}")
        if config.use_component3:
            for kind, action, dim in config.component3_specs:
                key = seq_key(kind, action)
                self.component3[key] = EmbeddingTable.random(self._vocab_size(kind), dim, rng, name=f"c3.{key}",
                                                             std=config.embedding_init_std)

    def _vocab_size(self, kind: str) -> int:
        try:
            return int(self.config.vocab_sizes[kind])
        except KeyError:
            raise ADPMConfigError(f"vocab size for entity kind {kind!r} is missing") from None

    def parameters(self) -> list[Tensor]:
        params = self.encoder.parameters() if self.encoder is not None else []
        params.extend(t.weights for t in self.component3.values())
        return params

    def frozen_tables(self) -> list[EmbeddingTable]:
        if not self.config.use_component2:
            return []
        return [self.pretrained[f] for f in self.config.pretrained_flavors]

    def __call__(self, inputs: ADPMInputs, training: bool = False,
                 rng: np.random.Generator | None = None) -> ADPMOutput:
        cfg = self.config
        missing = [k for k in cfg.required_keys() if k not in inputs.sequences]
        if missing:
            raise ADPMConfigError(f"inputs lack sequences {missing}")
        o1 = o2 = o3 = None
        if self.encoder is not None:
            o1 = self.encoder(inputs.target, inputs.sequences[cfg.encoder_key], training, rng)
        if cfg.use_component2:
            union = _union([inputs.sequences[k] for k in cfg.component2_keys])
            o2 = ag.concat([avg_pool_sequence(self.pretrained[f], union) for f in cfg.pretrained_flavors], axis=-1)
        if cfg.use_component3:
            o3 = ag.concat([avg_pool_sequence(table, inputs.sequences[key])
                            for key, table in self.component3.items()], axis=-1)
        parts = [o for o in (o1, o2, o3) if o is not None]
        u = parts[0] if len(parts) == 1 else ag.concat(parts, axis=-1)
        return ADPMOutput(o1, o2, o3, u)


def _union(batches: Sequence[PaddedBatch]) -> PaddedBatch:
    """Concatenate several listing sequences along the position axis."""
    if len(batches) == 1:
        return batches[0]
    return PaddedBatch(np.concatenate([b.indices for b in batches], axis=1),
                       np.concatenate([b.mask for b in batches], axis=1),
                       sum(b.lengths for b in batches), batches[0].pad_index)


def adpm_forward(target: np.ndarray, sequences: Mapping[str, PaddedBatch], config: ADPMConfig,
                 module: ADPM, training: bool = False, rng: np.random.Generator | None = None) -> ADPMOutput:
    """Functional entry point mirroring ``ADPM.__call__``."""
    if module.config is not config:
        raise ADPMConfigError("module was built from a different config")
    return module(ADPMInputs(np.asarray(target), dict(sequences)), training, rng)
