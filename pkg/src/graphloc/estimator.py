"""scikit-learn style wrapper around training, embedding and retrieval."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .encoder import EncoderConfig
from .losses import LossConfig
from .params import ParamStore
from .retrieval import EmbeddingIndex, embed_records, evaluate, order_by_score, score_matrix
from .trainer import TrainConfig, train
from .validation import check_corpus, check_records


def store_from_state(state) -> ParamStore:
    store = ParamStore()
    for name, arr in state.items():
        store.add(name, arr)
    return store


class GraphLocalizer(BaseEstimator):
    """Learn view embeddings from a paired corpus and retrieve satellite views for drone queries.

    ``fit`` takes a corpus, ``transform`` maps records to embeddings and
    ``predict`` returns the scene_id of the best-scoring gallery view.
    """

    def __init__(
        self,
        layer_kind="transformer_attention",
        hidden_dim=64,
        pooling="gem",
        dropout=0.5,
        use_spatial=True,
        use_semantic=True,
        use_global_node=True,
        use_cosine=True,
        epochs=100,
        batch_size=8,
        lr=3e-3,
        weight_decay=1e-5,
        val_fraction=0.2,
        use_loss_node=True,
        use_loss_m=True,
        use_loss_cls=True,
        seed=2024,
    ):
        self.layer_kind = layer_kind
        self.hidden_dim = hidden_dim
        self.pooling = pooling
        self.dropout = dropout
        self.use_spatial = use_spatial
        self.use_semantic = use_semantic
        self.use_global_node = use_global_node
        self.use_cosine = use_cosine
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.val_fraction = val_fraction
        self.use_loss_node = use_loss_node
        self.use_loss_m = use_loss_m
        self.use_loss_cls = use_loss_cls
        self.seed = seed

    def _encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            layer_kind=self.layer_kind,
            hidden_dim=self.hidden_dim,
            pooling=self.pooling,
            dropout=self.dropout,
            use_spatial=self.use_spatial,
            use_semantic=self.use_semantic,
            use_global_node=self.use_global_node,
            use_cosine=self.use_cosine,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            val_fraction=self.val_fraction,
            seed=self.seed,
            use_loss_node=self.use_loss_node,
            use_loss_m=self.use_loss_m,
            use_loss_cls=self.use_loss_cls,
        )

    def fit(self, X, y=None):
        corpus = check_corpus(X)
        self.encoder_config_ = self._encoder_config()
        result = train(corpus, self.encoder_config_, LossConfig(), self._train_config())
        self.store_ = result.store
        self.trace_ = result.trace
        self.classes_ = np.array(result.classes)
        self.feature_dim_ = corpus.feature_dim
        self.gallery_ = corpus.by_view("satellite")
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "store_")
        records = check_records(X, self.feature_dim_)
        return embed_records(records, self.store_, self.encoder_config_)

    def build_index(self, X) -> EmbeddingIndex:
        records = check_records(X, self.feature_dim_)
        return EmbeddingIndex(
            [r.image_id for r in records], [r.scene_id for r in records], self.transform(records)
        )

    def decision_function(self, X, gallery=None) -> np.ndarray:
        """Query-by-gallery similarity, with the detection-free fallback applied."""
        check_is_fitted(self, "store_")
        queries = check_records(X, self.feature_dim_)
        gallery = self.gallery_ if gallery is None else check_records(gallery, self.feature_dim_)
        return score_matrix(queries, gallery, self.store_, self.encoder_config_)

    def predict(self, X, gallery=None) -> np.ndarray:
        gallery = self.gallery_ if gallery is None else check_records(gallery, self.feature_dim_)
        S = self.decision_function(X, gallery)
        ids = [g.image_id for g in gallery]
        return np.array([gallery[order_by_score(row, ids)[0]].scene_id for row in S])

    def score(self, X, y=None, gallery=None) -> float:
        """Drone-to-satellite R@1 of ``X`` (drone records) against the gallery."""
        check_is_fitted(self, "store_")
        queries = check_records(X, self.feature_dim_)
        gallery = self.gallery_ if gallery is None else check_records(gallery, self.feature_dim_)
        return evaluate(None, self.store_, self.encoder_config_, "d2s", queries=queries, gallery=gallery).r1
