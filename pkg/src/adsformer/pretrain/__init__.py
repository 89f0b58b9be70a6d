"""Learners for the frozen listing tables consumed by ADPM component two."""

from .air import (AirConfig, AirModel, air_batch_loss, co_click_pairs, content_features, cosine_matrix,
                  fit_air, in_batch_softmax_loss, infer_table, negative_mask, retrieval_accuracy, train_air)
from .estimators import AirEmbedder, SkipGramEmbedder
from .skipgram import (EmptyCorpusError, HuffmanTree, Session, SkipGramConfig, SkipGramModel, UnknownListingError,
                       fit_skipgram, group_cosine_gap, hierarchical_loss, negative_sampling_loss,
                       sessions_from_impressions, skipgram_prob, taxonomy_sessions, train_skipgram)

__all__ = [
    "AirConfig", "AirEmbedder", "AirModel", "EmptyCorpusError", "HuffmanTree", "Session", "SkipGramConfig",
    "SkipGramEmbedder", "SkipGramModel", "UnknownListingError", "air_batch_loss", "co_click_pairs",
    "content_features", "cosine_matrix", "fit_air", "fit_skipgram", "group_cosine_gap", "hierarchical_loss",
    "in_batch_softmax_loss", "infer_table", "negative_mask", "negative_sampling_loss", "retrieval_accuracy",
    "sessions_from_impressions", "skipgram_prob", "taxonomy_sessions", "train_air", "train_skipgram",
]
