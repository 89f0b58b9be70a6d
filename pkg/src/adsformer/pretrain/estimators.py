"""scikit-learn style wrappers: ``fit`` learns the table, ``transform`` looks listings up."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..rng import stream
from .air import AirConfig, fit_air, infer_table
from .skipgram import SkipGramConfig, fit_skipgram


def _rows(table, X) -> np.ndarray:
    ids = np.asarray(X, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise IndexError(f"listing id out of range for a table with {table.vocab_size} rows")
    return table.weights.data[ids]


class SkipGramEmbedder(TransformerMixin, BaseEstimator):
    """``fit(sessions)``; ``transform(listing_ids)`` returns their 64-d vectors."""

    def __init__(self, dim: int = 64, window: int = 5, mode: str = "hierarchical", epochs: int = 3,
                 lr: float = 0.05, batch_size: int = 128, negatives: int = 5, purchase_upsample: int = 5,
                 num_rows: int | None = None, random_state: int = 0):
        self.dim = dim
        self.window = window
        self.mode = mode
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.negatives = negatives
        self.purchase_upsample = purchase_upsample
        self.num_rows = num_rows
        self.random_state = random_state

    def fit(self, X, y=None):
        cfg = SkipGramConfig(dim=self.dim, window=self.window, mode=self.mode, epochs=self.epochs, lr=self.lr,
                             batch_size=self.batch_size, negatives=self.negatives,
                             purchase_upsample=self.purchase_upsample)
        self.model_ = fit_skipgram(list(X), cfg, stream(self.random_state, "skipgram"))
        self.table_ = self.model_.to_table(self.num_rows)
        return self

    def transform(self, X):
        check_is_fitted(self, "table_")
        return _rows(self.table_, X)


class AirEmbedder(TransformerMixin, BaseEstimator):
    """``fit(features, pairs)`` with ``pairs = (source_ids, candidate_ids)``; ``transform(listing_ids)``."""

    def __init__(self, batch_size: int = 256, num_negatives: int | None = None, epochs: int = 5,
                 lr: float = 0.002, temperature: float = 1.0, hidden: int = 256, dim: int = 256,
                 random_state: int = 0):
        self.batch_size = batch_size
        self.num_negatives = num_negatives
        self.epochs = epochs
        self.lr = lr
        self.temperature = temperature
        self.hidden = hidden
        self.dim = dim
        self.random_state = random_state

    def fit(self, X, y):
        features = np.asarray(X, dtype=np.float64)
        cfg = AirConfig(self.batch_size, self.num_negatives, self.epochs, self.lr, self.temperature,
                        self.hidden, self.dim)
        self.model_ = fit_air(features, y, cfg, stream(self.random_state, "air"))
        self.table_ = infer_table(self.model_, features)
        return self

    def transform(self, X):
        check_is_fitted(self, "table_")
        return _rows(self.table_, X)
