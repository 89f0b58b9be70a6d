"""User action sequences: windowing, vocabularies, padding, synthetic data.

Sequences are stored reverse-chronologically (most recent event first).
Entities are addressed by opaque string ids such as ``L17`` (listing),
``S3`` (shop) or ``T0`` (taxonomy).
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .rng import stream

DEFAULT_WINDOW_SECONDS = 3600


class Action(str, enum.Enum):
    VIEW = "view"
    FAVORITE = "favorite"
    CART_ADD = "cart_add"
    PURCHASE = "purchase"
    SEARCH = "search"


class EntityKind(str, enum.Enum):
    LISTING = "listing"
    SHOP = "shop"
    TAXONOMY = "taxonomy"
    QUERY = "query"


ENTITY_PREFIX = {EntityKind.LISTING: "L", EntityKind.SHOP: "S",
                 EntityKind.TAXONOMY: "T", EntityKind.QUERY: "Q"}


def entity_id(kind: EntityKind | str, index: int) -> str:
    return f"{ENTITY_PREFIX[EntityKind(kind)]}{int(index)}"


def seq_key(kind: EntityKind | str, action: Action | str) -> str:
    return f"{EntityKind(kind).value}:{Action(action).value}"


def parse_seq_key(key: str) -> tuple[EntityKind, Action]:
    kind, action = key.split(":")
    return EntityKind(kind), Action(action)


# Sequences the synthetic generator emits, in file column order.
SEQUENCE_KEYS: tuple[str, ...] = (
    "listing:view",
    "listing:favorite", "listing:cart_add", "listing:purchase",
    "shop:favorite", "shop:cart_add", "shop:purchase",
    "taxonomy:favorite", "taxonomy:cart_add", "taxonomy:purchase",
)


@dataclass(frozen=True)
class ActionEvent:
    action: Action
    entity_kind: EntityKind
    entity_id: str
    timestamp: int

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"timestamp must be non-negative, got {self.timestamp}")


@dataclass
class ActionSequence:
    events: list[ActionEvent]
    max_len: int = 50
    window_seconds: int = DEFAULT_WINDOW_SECONDS

    def __len__(self) -> int:
        return len(self.events)

    @property
    def entity_ids(self) -> list[str]:
        return [e.entity_id for e in self.events]


def truncate_window(events: Sequence[ActionEvent], window_seconds: int = DEFAULT_WINDOW_SECONDS,
                    max_len: int = 50) -> ActionSequence:
    """Keep events within ``window_seconds`` of the newest one, then the ``max_len`` newest.

    The window boundary is inclusive.
    """
    events = list(events)
    if not events:
        return ActionSequence([], max_len, window_seconds)
    newest = events[0].timestamp
    kept = [e for e in events if newest - e.timestamp <= window_seconds]
    return ActionSequence(kept[:max_len], max_len, window_seconds)


# -- vocabulary ---------------------------------------------------------
@dataclass
class Vocabulary:
    """Top-K entity ids by frequency; everything else maps to an OOV slot."""

    entries: list[tuple[str, int]]
    num_oov: int = 1
    K: int | None = None
    index_of: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.K is None:
            self.K = len(self.entries)
        if len(self.entries) > self.K:
            raise ValueError(f"{len(self.entries)} entries exceed K={self.K}")
        if self.num_oov < 1:
            raise ValueError("num_oov must be at least 1")
        self.index_of = {eid: self.num_oov + i for i, (eid, _) in enumerate(self.entries)}

    def __len__(self) -> int:
        """Table rows needed, including OOV slots."""
        return self.num_oov + len(self.entries)

    def __contains__(self, eid: str) -> bool:
        return eid in self.index_of

    def oov_index(self, eid: str) -> int:
        if self.num_oov == 1:
            return 0
        # stable across processes, unlike hash()
        return sum(eid.encode("utf-8")) % self.num_oov

    def index(self, eid: str) -> int:
        found = self.index_of.get(eid)
        return self.oov_index(eid) if found is None else found

    def lookup_array(self, kind: EntityKind | str, num_entities: int) -> np.ndarray:
        """Vocabulary index for every raw integer entity of ``kind``."""
        return np.array([self.index(entity_id(kind, i)) for i in range(num_entities)], dtype=np.int64)

    def save(self, path: str | Path) -> None:
        lines = [f"{self.K} {self.num_oov}"]
        lines.extend(f"{eid}\t{freq}" for eid, freq in self.entries)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ValueError(f"{path}: empty vocabulary file")
        k, num_oov = (int(v) for v in lines[0].split())
        entries = []
        for line in lines[1:]:
            if line:
                eid, freq = line.split("\t")
                entries.append((eid, int(freq)))
        return cls(entries, num_oov=num_oov, K=k)


def build_vocab(corpus: Iterable[Iterable[str]], K: int, num_oov: int = 1) -> Vocabulary:
    """Vocabulary of the ``K`` most frequent ids; ties go to the smaller id."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    counts: Counter[str] = Counter()
    for seq in corpus:
        counts.update(e.entity_id if isinstance(e, ActionEvent) else e for e in seq)
    return vocab_from_counts(counts, K, num_oov)


def vocab_from_counts(counts: Mapping[str, int], K: int, num_oov: int = 1) -> Vocabulary:
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    ranked = sorted(((e, int(c)) for e, c in counts.items() if c > 0), key=lambda kv: (-kv[1], kv[0]))[:K]
    return Vocabulary(ranked, num_oov=num_oov, K=K)


# -- padding ------------------------------------------------------------
@dataclass
class PaddedBatch:
    indices: np.ndarray  # [batch, M] int64
    mask: np.ndarray  # [batch, M] bool
    lengths: np.ndarray  # [batch] int64
    pad_index: int = 0

    @property
    def batch_size(self) -> int:
        return self.indices.shape[0]

    @property
    def max_len(self) -> int:
        return self.indices.shape[1]

    def unpad(self) -> list[list[int]]:
        return [row[:n].tolist() for row, n in zip(self.indices, self.lengths)]

    def take(self, rows) -> "PaddedBatch":
        return PaddedBatch(self.indices[rows], self.mask[rows], self.lengths[rows], self.pad_index)


def pad_and_mask(sequences: Sequence[Sequence[str] | ActionSequence], vocab: Vocabulary,
                 M: int, pad_index: int = 0) -> PaddedBatch:
    """Map id sequences to a fixed ``[batch, M]`` index matrix plus a validity mask."""
    n = len(sequences)
    indices = np.full((n, M), pad_index, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    for i, seq in enumerate(sequences):
        ids = seq.entity_ids if isinstance(seq, ActionSequence) else list(seq)
        ids = ids[:M]
        lengths[i] = len(ids)
        for j, eid in enumerate(ids):
            indices[i, j] = vocab.index(eid)
    mask = np.arange(M)[None, :] < lengths[:, None]
    return PaddedBatch(indices, mask, lengths, pad_index)


def pad_index_matrix(raw: np.ndarray, lengths: np.ndarray, lookup: np.ndarray,
                     pad_index: int = 0) -> PaddedBatch:
    """Vectorised ``pad_and_mask`` for raw integer entities (``-1`` marks padding)."""
    mask = np.arange(raw.shape[1])[None, :] < lengths[:, None]
    safe = np.where(mask, raw, 0)
    indices = np.where(mask, lookup[safe], pad_index).astype(np.int64)
    return PaddedBatch(indices, mask, lengths.astype(np.int64), pad_index)


# -- synthetic world ----------------------------------------------------
@dataclass
class GeneratorConfig:
    num_users: int = 400
    num_listings: int = 300
    num_shops: int = 24
    num_taxonomies: int = 8
    d_z: int = 8
    d_style: int = 4  # hidden listing style: never exposed as a feature or in content vectors
    max_len: int = 20
    window_seconds: int = DEFAULT_WINDOW_SECONDS
    attr_noise: float = 0.6
    pref_noise: float = 0.5
    observed_noise: float = 0.0  # noise on the preference vector exposed as context
    focus: float = 0.75  # chance a viewed listing comes from the session's main taxonomy
    style_focus: float = 3.0  # how strongly a session's views follow its style mood
    match_rate: float = 0.25  # chance the candidate was viewed in the session
    alpha: float = 1.0  # long-term preference x candidate attributes
    beta: float = 1.2  # mean recently viewed attributes x candidate attributes
    gamma: float = 3.0  # candidate shop appears in recent favorite/cart/purchase shops
    delta: float = 1.5  # candidate listing itself was recently viewed
    eta: float = 3.0  # mean recently viewed style x candidate style
    click_rate: float = 0.3
    purchase_alpha: float = 0.5
    purchase_beta: float = 0.6
    purchase_gamma: float = 2.0
    purchase_delta: float = 0.8
    purchase_eta: float = 1.0
    purchase_rate: float = 0.2  # among clicked rows

    def null_signal(self) -> "GeneratorConfig":
        """Copy with every sequence-borne label term zeroed."""
        import dataclasses
        return dataclasses.replace(self, beta=0.0, gamma=0.0, delta=0.0, eta=0.0,
                                   purchase_beta=0.0, purchase_gamma=0.0, purchase_delta=0.0,
                                   purchase_eta=0.0)


@dataclass
class SyntheticWorld:
    config: GeneratorConfig
    seed: int
    taxonomy_centers: np.ndarray  # [T, d_z]
    user_prefs: np.ndarray  # [U, d_z]
    listing_attrs: np.ndarray  # [L, d_z]
    listing_shop: np.ndarray  # [L]
    listing_taxonomy: np.ndarray  # [L]
    user_pref_observed: np.ndarray  # preferences as exposed in context
    listing_style: np.ndarray  # [L, d_style], hidden

    @property
    def num_users(self) -> int:
        return self.user_prefs.shape[0]

    @property
    def num_listings(self) -> int:
        return self.listing_attrs.shape[0]

    @property
    def num_shops(self) -> int:
        return self.config.num_shops

    @property
    def num_taxonomies(self) -> int:
        return self.config.num_taxonomies

    def num_entities(self, kind: EntityKind | str) -> int:
        kind = EntityKind(kind)
        return {EntityKind.LISTING: self.num_listings, EntityKind.SHOP: self.num_shops,
                EntityKind.TAXONOMY: self.num_taxonomies}[kind]

    def entity_of_listing(self, kind: EntityKind | str, listings: np.ndarray) -> np.ndarray:
        kind = EntityKind(kind)
        if kind is EntityKind.LISTING:
            return listings
        table = self.listing_shop if kind is EntityKind.SHOP else self.listing_taxonomy
        return np.where(listings >= 0, table[np.maximum(listings, 0)], -1)

    def context_features(self, users: np.ndarray, candidates: np.ndarray) -> np.ndarray:
        """Non-personalised wide input: candidate attributes, shop and taxonomy one-hots, user preference."""
        shop = np.eye(self.num_shops)[self.listing_shop[candidates]]
        tax = np.eye(self.num_taxonomies)[self.listing_taxonomy[candidates]]
        return np.concatenate([self.listing_attrs[candidates], shop, tax,
                               self.user_pref_observed[users]], axis=1)

    @property
    def context_dim(self) -> int:
        return 2 * self.config.d_z + self.num_shops + self.num_taxonomies

    def save(self, path: str | Path) -> None:
        import dataclasses
        import json
        with open(path, "wb") as fh:
            np.savez(fh, taxonomy_centers=self.taxonomy_centers, user_prefs=self.user_prefs,
                     listing_attrs=self.listing_attrs, listing_shop=self.listing_shop,
                     listing_taxonomy=self.listing_taxonomy,
                     user_pref_observed=self.user_pref_observed, listing_style=self.listing_style,
                     meta=np.frombuffer(json.dumps({"seed": self.seed, "config": dataclasses.asdict(self.config)},
                                                   sort_keys=True).encode(), dtype=np.uint8))

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticWorld":
        import json
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            return cls(GeneratorConfig(**meta["config"]), meta["seed"], z["taxonomy_centers"],
                       z["user_prefs"], z["listing_attrs"], z["listing_shop"],
                       z["listing_taxonomy"], z["user_pref_observed"], z["listing_style"])


def generate_world(config: GeneratorConfig, seed: int) -> SyntheticWorld:
    if min(config.num_users, config.num_listings, config.num_shops,
           config.num_taxonomies, config.d_z) <= 0:
        raise ValueError("generator dimensions must be positive")
    rng = stream(seed, "world")
    d = config.d_z
    centers = rng.normal(size=(config.num_taxonomies, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    listing_tax = rng.integers(0, config.num_taxonomies, size=config.num_listings)
    listing_shop = rng.integers(0, config.num_shops, size=config.num_listings)
    attrs = centers[listing_tax] + config.attr_noise * rng.normal(size=(config.num_listings, d)) / np.sqrt(d)
    user_home = rng.integers(0, config.num_taxonomies, size=config.num_users)
    prefs = centers[user_home] + config.pref_noise * rng.normal(size=(config.num_users, d)) / np.sqrt(d)
    observed = prefs + config.observed_noise * rng.normal(size=prefs.shape) / np.sqrt(d)
    style = rng.normal(size=(config.num_listings, max(config.d_style, 1)))
    style /= np.linalg.norm(style, axis=1, keepdims=True)
    return SyntheticWorld(config, seed, centers, prefs, attrs, listing_shop, listing_tax, observed, style)


@dataclass
class ImpressionData:
    """Columnar impressions; sequences hold raw entity integers, ``-1`` padded."""

    users: np.ndarray
    candidates: np.ndarray
    click: np.ndarray
    purchase: np.ndarray
    request_ts: np.ndarray
    seq_ids: dict[str, np.ndarray]
    seq_ts: dict[str, np.ndarray]
    lengths: dict[str, np.ndarray]

    def __len__(self) -> int:
        return int(self.users.shape[0])

    @property
    def keys(self) -> list[str]:
        return list(self.seq_ids)

    @property
    def max_len(self) -> int:
        return next(iter(self.seq_ids.values())).shape[1]

    def subset(self, rows) -> "ImpressionData":
        rows = np.asarray(rows)
        return ImpressionData(self.users[rows], self.candidates[rows], self.click[rows],
                              self.purchase[rows], self.request_ts[rows],
                              {k: v[rows] for k, v in self.seq_ids.items()},
                              {k: v[rows] for k, v in self.seq_ts.items()},
                              {k: v[rows] for k, v in self.lengths.items()})

    def sequence(self, row: int, key: str) -> ActionSequence:
        kind, action = parse_seq_key(key)
        n = int(self.lengths[key][row])
        events = [ActionEvent(action, kind, entity_id(kind, self.seq_ids[key][row, j]),
                              int(self.seq_ts[key][row, j])) for j in range(n)]
        return ActionSequence(events, self.max_len)

    def id_sequences(self, key: str) -> list[list[str]]:
        kind, _ = parse_seq_key(key)
        prefix = ENTITY_PREFIX[kind]
        return [[f"{prefix}{v}" for v in row[:n]] for row, n in zip(self.seq_ids[key], self.lengths[key])]

    def with_padding(self, M: int) -> "ImpressionData":
        """Same rows padded out to a larger ``M``."""
        extra = M - self.max_len
        if extra < 0:
            raise ValueError("with_padding cannot shrink sequences")
        pad = lambda a, fill: np.concatenate([a, np.full((a.shape[0], extra), fill, dtype=a.dtype)], axis=1)
        return ImpressionData(self.users, self.candidates, self.click, self.purchase, self.request_ts,
                              {k: pad(v, -1) for k, v in self.seq_ids.items()},
                              {k: pad(v, 0) for k, v in self.seq_ts.items()}, dict(self.lengths))


def _stack(rows: list[list[tuple[int, int]]], M: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids = np.full((len(rows), M), -1, dtype=np.int64)
    ts = np.zeros((len(rows), M), dtype=np.int64)
    lengths = np.zeros(len(rows), dtype=np.int64)
    for i, row in enumerate(rows):
        lengths[i] = len(row)
        for j, (e, t) in enumerate(row):
            ids[i, j] = e
            ts[i, j] = t
    return ids, ts, lengths


def _bias_for_rate(logits: np.ndarray, rate: float) -> float:
    lo, hi = -30.0, 30.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.mean(1.0 / (1.0 + np.exp(-(logits + mid)))) < rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def label_logits(world: SyntheticWorld, data: ImpressionData, task: str = "click") -> np.ndarray:
    """Planted label logits (before the base-rate bias) for each impression."""
    cfg = world.config
    if task == "click":
        a, b, g, dl, e = cfg.alpha, cfg.beta, cfg.gamma, cfg.delta, cfg.eta
    else:
        a, b, g, dl, e = (cfg.purchase_alpha, cfg.purchase_beta, cfg.purchase_gamma,
                          cfg.purchase_delta, cfg.purchase_eta)
    cand = data.candidates
    cand_attr = world.listing_attrs[cand]
    pref_term = np.einsum("ij,ij->i", world.user_prefs[data.users], cand_attr)

    views = data.seq_ids["listing:view"]
    vmask = (views >= 0)[..., None]
    counts = np.maximum(vmask.sum(axis=1), 1)
    mean_attr = (world.listing_attrs[np.maximum(views, 0)] * vmask).sum(axis=1) / counts
    attr_term = np.einsum("ij,ij->i", mean_attr, cand_attr)
    mean_style = (world.listing_style[np.maximum(views, 0)] * vmask).sum(axis=1) / counts
    style_term = np.einsum("ij,ij->i", mean_style, world.listing_style[cand])
    match = (views == cand[:, None]).any(axis=1).astype(float)

    shop_rows = np.concatenate([data.seq_ids[k] for k in ("shop:favorite", "shop:cart_add", "shop:purchase")], axis=1)
    same_shop = (shop_rows == world.listing_shop[cand][:, None]).any(axis=1).astype(float)
    return a * pref_term + b * attr_term + g * same_shop + dl * match + e * style_term


class _ListingSampler:
    """Per-impression listing draws: pick a taxonomy, then a listing inside it weighted by style mood."""

    def __init__(self, world: SyntheticWorld, users: np.ndarray, rng: np.random.Generator):
        cfg = world.config
        self.rng, self.focus = rng, cfg.focus
        n = len(users)
        aff = world.user_prefs[users] @ world.taxonomy_centers.T * 3.0
        aff = np.exp(aff - aff.max(axis=1, keepdims=True))
        self.cum_tax = (aff / aff.sum(axis=1, keepdims=True)).cumsum(axis=1)
        self.num_tax = cfg.num_taxonomies
        self.main_tax = self._sample_tax(rng.random(n))
        mood = rng.normal(size=(n, world.listing_style.shape[1]))
        mood /= np.linalg.norm(mood, axis=1, keepdims=True)
        self.order = np.argsort(world.listing_taxonomy, kind="stable")
        sorted_tax = world.listing_taxonomy[self.order]
        self.start = np.searchsorted(sorted_tax, np.arange(self.num_tax), side="left")
        self.end = np.searchsorted(sorted_tax, np.arange(self.num_tax), side="right")
        logits = cfg.style_focus * (mood @ world.listing_style[self.order].T)
        weights = np.exp(logits - logits.max(axis=1, keepdims=True))
        self.cum = np.concatenate([np.zeros((n, 1)), weights.cumsum(axis=1)], axis=1)

    def _sample_tax(self, u: np.ndarray) -> np.ndarray:
        return (u[:, None] > self.cum_tax).sum(axis=1).clip(max=self.num_tax - 1)

    def draw(self) -> np.ndarray:
        n = len(self.main_tax)
        rng = self.rng
        other = self._sample_tax(rng.random(n))
        tax = np.where(rng.random(n) < self.focus, self.main_tax, other)
        rows = np.arange(n)
        lo, hi = self.cum[rows, self.start[tax]], self.cum[rows, self.end[tax]]
        target = lo + rng.random(n) * (hi - lo)
        pos = (self.cum[:, 1:] <= target[:, None]).sum(axis=1)
        pos = np.clip(pos, self.start[tax], np.maximum(self.end[tax] - 1, self.start[tax])).clip(max=len(self.order) - 1)
        return self.order[pos]


def generate_impressions(world: SyntheticWorld, n: int, rng: np.random.Generator) -> ImpressionData:
    """Sample ``n`` impressions with click and purchase labels from the planted model.

    Click labels depend on the user's long-term preference (visible as
    context), on the attributes and hidden style of recently viewed
    listings, on whether the candidate's shop appears among recent
    favorite/cart/purchase shops, and on whether the candidate itself was
    just viewed. Labels are Bernoulli draws from the sigmoid of that score.
    """
    cfg = world.config
    M, W = cfg.max_len, cfg.window_seconds
    users = rng.integers(0, world.num_users, size=n)
    sampler = _ListingSampler(world, users, rng)
    request_ts = 1_000_000 + rng.integers(0, 86_400 * 30, size=n)
    rows = np.arange(n)

    # views: newest first, truncated to the window anchored at the newest event, then to M
    slots = M + 5
    n_views = rng.integers(0, slots + 1, size=n)
    gaps = rng.exponential(W / max(M, 1) * 1.4, size=(n, slots)).astype(np.int64)
    times = request_ts[:, None] - 5 - np.cumsum(gaps, axis=1)
    drawn = np.stack([sampler.draw() for _ in range(slots)], axis=1)
    keep = (np.arange(slots)[None, :] < n_views[:, None]) & (times[:, :1] - times <= W)
    keep[:, M:] = False
    view_len = keep.sum(axis=1)
    view_ids = np.where(keep, drawn, -1)[:, :M]
    view_ts = np.where(keep, times, 0)[:, :M]

    seq_ids = {"listing:view": view_ids}
    seq_ts = {"listing:view": view_ts}
    lengths = {"listing:view": view_len}
    for action in ("favorite", "cart_add", "purchase"):
        cap = 3 if action != "purchase" else 1
        k = rng.integers(0, cap + 1, size=n)
        from_view = (rng.random((n, cap)) < 0.7) & (view_len[:, None] > 0)
        pick = rng.integers(0, np.maximum(view_len, 1)[:, None], size=(n, cap))
        fresh = np.stack([sampler.draw() for _ in range(cap)], axis=1)
        fresh_ts = request_ts[:, None] - rng.integers(10, W, size=(n, cap))
        ids = np.where(from_view, view_ids[rows[:, None], pick], fresh)
        ts = np.where(from_view, view_ts[rows[:, None], pick], fresh_ts)
        valid = np.arange(cap)[None, :] < k[:, None]
        order = np.argsort(np.where(valid, -ts, np.iinfo(np.int64).max), axis=1, kind="stable")
        valid = np.take_along_axis(valid, order, axis=1)
        ts = np.take_along_axis(ts, order, axis=1)
        valid &= ts[:, :1] - ts <= W  # same inclusive window as the views, anchored at the newest pick
        k = valid.sum(axis=1)
        ids = np.where(valid, np.take_along_axis(ids, order, axis=1), -1)
        ts = np.where(valid, ts, 0)
        pad_ids = np.full((n, M), -1, dtype=np.int64)
        pad_ts = np.zeros((n, M), dtype=np.int64)
        pad_ids[:, :cap], pad_ts[:, :cap] = ids, ts
        for kind in ("listing", "shop", "taxonomy"):
            key = f"{kind}:{action}"
            seq_ids[key] = world.entity_of_listing(kind, pad_ids).astype(np.int64)
            seq_ts[key] = pad_ts.copy()
            lengths[key] = k.astype(np.int64)

    r = rng.random(n)
    from_views = view_ids[rows, rng.integers(0, np.maximum(view_len, 1))]
    candidates = np.where((view_len > 0) & (r < cfg.match_rate), from_views,
                          np.where(r < 0.6, sampler.draw(), rng.integers(0, world.num_listings, size=n)))

    seq_ids = {k: seq_ids[k] for k in SEQUENCE_KEYS}
    data = ImpressionData(users, candidates.astype(np.int64), np.zeros(n, dtype=np.int64),
                          np.zeros(n, dtype=np.int64), request_ts.astype(np.int64), seq_ids,
                          {k: seq_ts[k] for k in SEQUENCE_KEYS}, {k: lengths[k] for k in SEQUENCE_KEYS})

    click_logit = label_logits(world, data, "click")
    click_logit = click_logit + _bias_for_rate(click_logit, cfg.click_rate)
    data.click = (rng.random(n) < 1.0 / (1.0 + np.exp(-click_logit))).astype(np.int64)
    buy_logit = label_logits(world, data, "purchase")
    clicked = data.click.astype(bool)
    buy_logit = buy_logit + _bias_for_rate(buy_logit[clicked] if clicked.any() else buy_logit, cfg.purchase_rate)
    data.purchase = (data.click.astype(bool) & (rng.random(n) < 1.0 / (1.0 + np.exp(-buy_logit)))).astype(np.int64)
    return data


# -- dataset files ------------------------------------------------------
DATASET_MAGIC = "#adsformer-impressions"


def write_impressions(data: ImpressionData, path: str | Path) -> None:
    """Tab-separated impressions, one per line, after a header declaring the row count."""
    keys = data.keys
    lines = [f"{DATASET_MAGIC} rows={len(data)} max_len={data.max_len} keys={','.join(keys)}"]
    prefix = {k: ENTITY_PREFIX[parse_seq_key(k)[0]] for k in keys}
    for i in range(len(data)):
        fields = [f"U{data.users[i]}", f"L{data.candidates[i]}", str(data.click[i]), str(data.purchase[i])]
        for k in keys:
            n = data.lengths[k][i]
            fields.append(",".join(f"{prefix[k]}{e}:{t}" for e, t in
                                   zip(data.seq_ids[k][i, :n], data.seq_ts[k][i, :n])))
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_impressions(path: str | Path) -> ImpressionData:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith(DATASET_MAGIC):
        raise ValueError(f"{path}: missing impressions header")
    header = dict(tok.split("=", 1) for tok in text[0].split()[1:])
    n, M, keys = int(header["rows"]), int(header["max_len"]), header["keys"].split(",")
    rows = text[1:]
    if len(rows) != n:
        raise ValueError(f"{path}: header declares {n} rows, found {len(rows)}")
    users = np.empty(n, dtype=np.int64)
    cands = np.empty(n, dtype=np.int64)
    click = np.empty(n, dtype=np.int64)
    purchase = np.empty(n, dtype=np.int64)
    cols: dict[str, list[list[tuple[int, int]]]] = {k: [] for k in keys}
    for i, line in enumerate(rows):
        fields = line.split("\t")
        if len(fields) != 4 + len(keys):
            raise ValueError(f"{path}:{i + 2}: expected {4 + len(keys)} fields, got {len(fields)}")
        users[i], cands[i] = int(fields[0][1:]), int(fields[1][1:])
        click[i], purchase[i] = int(fields[2]), int(fields[3])
        for k, field_ in zip(keys, fields[4:]):
            pairs = []
            if field_:
                for item in field_.split(","):
                    eid, ts = item.rsplit(":", 1)
                    pairs.append((int(eid[1:]), int(ts)))
            cols[k].append(pairs)
    seq_ids, seq_ts, lengths = {}, {}, {}
    for k in keys:
        seq_ids[k], seq_ts[k], lengths[k] = _stack(cols[k], M)
    request_ts = np.zeros(n, dtype=np.int64)  # generation-time only; not persisted
    return ImpressionData(users, cands, click, purchase, request_ts, seq_ids, seq_ts, lengths)


def vocab_corpus(data: ImpressionData, kind: EntityKind | str) -> list[list[str]]:
    """Every sequence over entities of ``kind`` (the corpus vocabularies are built from)."""
    kind = EntityKind(kind)
    out: list[list[str]] = []
    for key in data.keys:
        if parse_seq_key(key)[0] is kind:
            out.extend(data.id_sequences(key))
    return out


def entity_counts(data: ImpressionData, kind: EntityKind | str, num_entities: int,
                  include_candidates: bool = False) -> dict[str, int]:
    """Occurrence counts per entity id over all sequences of ``kind``; same totals as ``vocab_corpus``."""
    kind = EntityKind(kind)
    total = np.zeros(num_entities, dtype=np.int64)
    for key in data.keys:
        if parse_seq_key(key)[0] is kind:
            ids = data.seq_ids[key]
            valid = np.arange(ids.shape[1])[None, :] < data.lengths[key][:, None]
            total += np.bincount(ids[valid], minlength=num_entities)[:num_entities]
    if include_candidates and kind is EntityKind.LISTING:
        total += np.bincount(data.candidates, minlength=num_entities)[:num_entities]
    return {entity_id(kind, i): int(c) for i, c in enumerate(total) if c > 0}
