"""scikit-learn style estimators over impression datasets.

``AdsformerRanker`` is a binary classifier (CTR or PCCVR) whose ``X`` is a
:class:`RankingDataset`: the synthetic world (for context features) plus
columnar impressions (for user action sequences). Vocabularies are built
from the training corpus inside ``fit``.
"""

from __future__ import annotations

import numbers
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from .adpm import ADPMConfig, encode_inputs, default_component3_specs
from .checkpoint import load_checkpoint, save_checkpoint
from .embeddings import EmbeddingTable, PretrainedBundle
from .metrics import MetricReport, evaluate
from .ranking import DCNConfig, PersonalizedRanker, RankerConfig, probability
from .rng import stream
from .sequences import ImpressionData, SyntheticWorld, Vocabulary, entity_counts, vocab_from_counts
from .training import PreparedData, TrainConfig, negative_sample, predict_logits, train_ranker

ENTITY_KINDS = ("listing", "shop", "taxonomy")


@dataclass
class RankingDataset:
    world: SyntheticWorld
    impressions: ImpressionData

    def __len__(self) -> int:
        return len(self.impressions)

    def subset(self, rows) -> "RankingDataset":
        return RankingDataset(self.world, self.impressions.subset(rows))

    @property
    def context(self) -> np.ndarray:
        return self.world.context_features(self.impressions.users, self.impressions.candidates)

    def labels(self, task: str) -> np.ndarray:
        return self.impressions.click if task == "ctr" else self.impressions.purchase


def check_ranking_input(X) -> RankingDataset:
    """Validate estimator input and return it as a ``RankingDataset``."""
    if isinstance(X, tuple) and len(X) == 2:
        X = RankingDataset(*X)
    if not isinstance(X, RankingDataset):
        raise TypeError(f"expected a RankingDataset (world, impressions), got {type(X).__name__}")
    if len(X) == 0:
        raise ValueError("empty dataset")
    imp = X.impressions
    if imp.candidates.max() >= X.world.num_listings or imp.candidates.min() < 0:
        raise ValueError("candidate listing ids fall outside the world")
    return X


def reindex_table(table: EmbeddingTable, vocab: Vocabulary, kind: str = "listing") -> EmbeddingTable:
    """Frozen copy of a raw-id-indexed table laid out in vocabulary order; OOV rows are zero."""
    weights = np.zeros((len(vocab), table.dim))
    for eid, index in vocab.index_of.items():
        raw = int(eid[1:])
        if raw < table.vocab_size:
            weights[index] = table.weights.data[raw]
    return EmbeddingTable.frozen(weights, name=table.name)


class AdsformerRanker(ClassifierMixin, BaseEstimator):
    """DCN ranker, optionally personalized with the three-component ADPM.

    ``components`` selects ADPM components (an empty tuple gives the
    non-personalized baseline). ``num_cross=0`` removes the cross stack.
    """

    def __init__(self, task: str = "ctr", components: Sequence[int] = (1, 2, 3), pooling_mode: str = "max",
                 pretrained_flavors: Sequence[str] = ("air",), component3_dims: Mapping[str, int] | None = None,
                 component3_actions: Sequence[str] = ("favorite", "cart_add", "purchase"),
                 num_heads: int = 3, d1: int = 32, head_dim: int | None = None, num_blocks: int = 1,
                 dropout: float = 0.0, max_len: int | None = None, vocab_k: int | Mapping[str, int] | None = None,
                 num_oov: int = 1, num_cross: int | None = None, deep_sizes: Sequence[int] | None = None,
                 width_divisor: float | None = None, topology: str = "parallel", epochs: int = 1,
                 batch_size: int = 256, lr_max: float = 0.002, max_steps: int | None = None,
                 sampling: str = "balanced_50_50", pretrained: PretrainedBundle | None = None,
                 random_state: int = 0):
        self.task = task
        self.components = components
        self.pooling_mode = pooling_mode
        self.pretrained_flavors = pretrained_flavors
        self.component3_dims = component3_dims
        self.component3_actions = component3_actions
        self.num_heads = num_heads
        self.d1 = d1
        self.head_dim = head_dim
        self.num_blocks = num_blocks
        self.dropout = dropout
        self.max_len = max_len
        self.vocab_k = vocab_k
        self.num_oov = num_oov
        self.num_cross = num_cross
        self.deep_sizes = deep_sizes
        self.width_divisor = width_divisor
        self.topology = topology
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.max_steps = max_steps
        self.sampling = sampling
        self.pretrained = pretrained
        self.random_state = random_state

    # -- configuration ----------------------------------------------------
    def _vocab_k(self, kind: str, default: int) -> int:
        if self.vocab_k is None:
            return default
        if isinstance(self.vocab_k, numbers.Integral):
            return int(self.vocab_k) if kind == "listing" else default
        return int(self.vocab_k.get(kind, default))

    def adpm_config(self, vocab_sizes: Mapping[str, int], max_len: int) -> ADPMConfig | None:
        comps = set(self.components)
        if not comps:
            return None
        if not comps <= {1, 2, 3}:
            raise ValueError(f"components must be drawn from {{1, 2, 3}}, got {sorted(comps)}")
        cfg = ADPMConfig(
            use_component1=1 in comps, use_component2=2 in comps, use_component3=3 in comps,
            pooling_mode=self.pooling_mode, pretrained_flavors=tuple(self.pretrained_flavors),
            component3_specs=default_component3_specs(self.component3_dims, tuple(self.component3_actions)),
            num_heads=self.num_heads, head_dim=self.head_dim, d1=self.d1, num_blocks=self.num_blocks,
            dropout=self.dropout, max_len=max_len, vocab_sizes=dict(vocab_sizes))
        cfg.validate()
        return cfg

    def preflight_config(self) -> None:
        """Reject inconsistent settings that can be judged without data or tables."""
        if self.task not in ("ctr", "pccvr"):
            raise ValueError(f"task must be 'ctr' or 'pccvr', got {self.task!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_max <= 0:
            raise ValueError("epochs, batch_size and lr_max must be positive")
        if self.sampling not in ("balanced_50_50", "keep_half_negatives", "none"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        self.adpm_config({k: 1 for k in ENTITY_KINDS}, self.max_len or 1)
        DCNConfig(task=self.task, num_cross=self.num_cross, deep_sizes=self.deep_sizes,
                  width_divisor=self.width_divisor, topology=self.topology).resolved()

    def preflight(self) -> None:
        """Config checks plus the presence of every configured pretrained table."""
        self.preflight_config()
        cfg = self.adpm_config({k: 1 for k in ENTITY_KINDS}, self.max_len or 1)
        if cfg is not None and cfg.use_component2:
            bundle = self.pretrained or PretrainedBundle()
            missing = [f for f in cfg.pretrained_flavors if f not in bundle]
            if missing:
                raise ValueError(f"pretrained flavors {missing} configured without tables")

    # -- data -------------------------------------------------------------
    def _build_vocabs(self, data: ImpressionData, world: SyntheticWorld) -> dict[str, Vocabulary]:
        vocabs = {}
        for kind in ENTITY_KINDS:
            n = world.num_entities(kind)
            counts = entity_counts(data, kind, n, include_candidates=True)
            vocabs[kind] = vocab_from_counts(counts, self._vocab_k(kind, n), self.num_oov)
        return vocabs

    def _prepare(self, X: RankingDataset) -> PreparedData:
        imp = X.impressions
        inputs = None
        if self.model_.adpm is not None:
            if imp.max_len > self.max_len_:
                raise ValueError(f"sequences of length {imp.max_len} exceed the fitted max_len {self.max_len_}")
            counts = {k: X.world.num_entities(k) for k in ENTITY_KINDS}
            inputs = encode_inputs(imp, self.vocabs_, counts, self.model_.adpm.config.required_keys())
        return PreparedData(X.context, inputs, X.labels(self.task).astype(np.float64),
                            imp.click.astype(bool))

    def _build_model(self, bundle: PretrainedBundle | None, rng: np.random.Generator) -> PersonalizedRanker:
        adpm_cfg = self.adpm_config({k: len(v) for k, v in self.vocabs_.items()}, self.max_len_)
        config = RankerConfig(task=self.task, context_dim=self.context_dim_, adpm=adpm_cfg,
                              dcn=DCNConfig(task=self.task, num_cross=self.num_cross,
                                            deep_sizes=None if self.deep_sizes is None else tuple(self.deep_sizes),
                                            width_divisor=self.width_divisor, topology=self.topology))
        return PersonalizedRanker(config, rng, bundle)

    # -- persistence ------------------------------------------------------
    def save(self, path) -> None:
        """Write a self-contained checkpoint: weights, frozen tables, vocabularies and settings."""
        check_is_fitted(self, "model_")
        params = {k: v for k, v in self.get_params().items() if k != "pretrained"}
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.items()}
        meta = {"estimator": params, "max_len": self.max_len_, "context_dim": self.context_dim_,
                "n_steps": self.n_steps_, "n_train_rows": self.n_train_rows_,
                "vocabs": {k: {"K": v.K, "num_oov": v.num_oov, "entries": v.entries} for k, v in self.vocabs_.items()}}
        save_checkpoint(path, self.model_.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "AdsformerRanker":
        state, meta = load_checkpoint(path)
        params = dict(meta["estimator"])
        for key in ("components", "pretrained_flavors", "component3_actions", "deep_sizes"):
            if params.get(key) is not None:
                params[key] = tuple(params[key])
        est = cls(**params)
        est.max_len_, est.context_dim_ = meta["max_len"], meta["context_dim"]
        est.n_steps_, est.n_train_rows_ = meta["n_steps"], meta["n_train_rows"]
        est.vocabs_ = {k: Vocabulary([tuple(e) for e in v["entries"]], num_oov=v["num_oov"], K=v["K"])
                       for k, v in meta["vocabs"].items()}
        flavors = [k.removeprefix("pretrained.") for k in state if k.startswith("pretrained.")]
        bundle = PretrainedBundle({f: EmbeddingTable.frozen(state[f"pretrained.{f}"], name=f) for f in flavors}) \
            if flavors else None
        est.model_ = est._build_model(bundle, stream(est.random_state, "init"))
        est.model_.load_state_dict(state)
        est.classes_ = np.array([0, 1])
        return est

    # -- estimator API ----------------------------------------------------
    def fit(self, X, y=None):
        self.preflight()
        X = check_ranking_input(X)
        imp = X.impressions
        labels = X.labels(self.task) if y is None else np.asarray(y)
        if labels.shape[0] != len(X):
            raise ValueError("y length does not match X")
        sample_rng = stream(self.random_state, "sampling")
        if self.task == "pccvr":
            rows = np.flatnonzero(imp.click == 1)
            if len(rows) == 0:
                raise ValueError("PCCVR needs clicked impressions to train on")
        else:
            rows = negative_sample(labels, self.sampling, sample_rng)
        train = X.subset(rows)
        self.max_len_ = self.max_len or imp.max_len
        self.vocabs_ = self._build_vocabs(train.impressions, X.world)
        bundle = None
        cfg = self.adpm_config({k: len(v) for k, v in self.vocabs_.items()}, self.max_len_)
        if cfg is not None and cfg.use_component2:
            bundle = PretrainedBundle({f: reindex_table(self.pretrained[f], self.vocabs_["listing"])
                                       for f in cfg.pretrained_flavors})
        self.context_dim_ = X.world.context_dim
        self.model_ = self._build_model(bundle, stream(self.random_state, "init"))
        prepared = self._prepare(train)
        if y is not None:
            prepared.labels = np.asarray(y, dtype=np.float64)[rows]
        tc = TrainConfig(self.epochs, self.batch_size, self.lr_max, "cosine", self.max_steps)
        self.n_steps_ = tc.total_steps(len(prepared))
        self.losses_ = train_ranker(self.model_, prepared, tc, stream(self.random_state, "train"))
        self.n_train_rows_ = len(prepared)
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_logits(self.model_, self._prepare(check_ranking_input(X)))

    def predict_proba(self, X) -> np.ndarray:
        p = probability(ag.Tensor(self.decision_function(X))).data
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def evaluation_rows(self, X) -> RankingDataset:
        """PCCVR is scored on clicked impressions only; CTR on every row."""
        X = check_ranking_input(X)
        return X.subset(np.flatnonzero(X.impressions.click == 1)) if self.task == "pccvr" else X

    def evaluate(self, X, calibration=None) -> MetricReport:
        X = self.evaluation_rows(X)
        z = self.decision_function(X)
        if calibration is None:
            p, order = probability(ag.Tensor(z)).data, z
        else:
            # rank by the logit itself: sigmoid rounding can merge distinct scores into ties
            p, order = calibration.apply(z), np.sign(calibration.A) * z
        return evaluate(p, X.labels(self.task), scores=order)
