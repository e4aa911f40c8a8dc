"""scikit-learn style wrappers around the functional API.

``UnitQuantizer`` behaves like a k-means clusterer over feature frames and
``DualSpanQA`` like a span predictor over :class:`~dualqa.datakit.SqaExample`
lists. Both follow the usual estimator contract: constructor arguments are
stored verbatim, ``fit`` returns ``self`` and learned state ends in ``_``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from dualqa.datakit import SqaExample, prepare_all
from dualqa.featio import FeatureMatrix
from dualqa.model import ModelConfig, SpanModel, build_model
from dualqa.quantizer import Codebook, encode, train_codebook
from dualqa.trainer import TrainConfig, TrainResult, evaluate_model, predict_spans, train
from dualqa.unitizer import TimeSpan
from dualqa.validation import check_frames


def _frame_list(X) -> list[np.ndarray]:
    if isinstance(X, FeatureMatrix):
        return [X.data]
    if isinstance(X, (list, tuple)):
        return [check_frames(x.data if isinstance(x, FeatureMatrix) else x) for x in X]
    return [check_frames(X)]


class UnitQuantizer(ClusterMixin, TransformerMixin, BaseEstimator):
    """k-means over feature frames; ``predict`` returns discrete unit ids.

    ``X`` may be a single (n_frames, dim) array, a FeatureMatrix, or a list of
    either (utterances are pooled for fitting).
    """

    def __init__(self, n_units: int = 64, max_iters: int = 100, rel_tol: float = 1e-6,
                 n_init: int = 1, seed: int = 0, threads: int = 1):
        self.n_units = n_units
        self.max_iters = max_iters
        self.rel_tol = rel_tol
        self.n_init = n_init
        self.seed = seed
        self.threads = threads

    def fit(self, X, y=None):
        self.codebook_ = train_codebook(_frame_list(X), self.n_units, self.max_iters,
                                        self.rel_tol, self.seed, self.n_init, self.threads)
        self.cluster_centers_ = self.codebook_.centroids
        self.inertia_ = self.codebook_.train_inertia
        self.n_iter_ = len(self.codebook_.inertia_history)
        self.n_features_in_ = self.cluster_centers_.shape[1]
        return self

    @classmethod
    def from_codebook(cls, codebook: Codebook, **params) -> UnitQuantizer:
        est = cls(n_units=codebook.K, **params)
        est.codebook_ = codebook
        est.cluster_centers_ = codebook.centroids
        est.inertia_ = codebook.train_inertia
        est.n_iter_ = len(codebook.inertia_history)
        est.n_features_in_ = codebook.dim
        return est

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "codebook_")
        return np.concatenate([encode(self.codebook_, m, self.threads) for m in _frame_list(X)])

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).predict(X)

    def transform(self, X) -> np.ndarray:
        """Euclidean distance from every frame to every centroid."""
        check_is_fitted(self, "codebook_")
        F = np.concatenate(_frame_list(X))
        C = self.cluster_centers_.astype(np.float64)
        d2 = ((F[:, None, :] - C[None]) ** 2).sum(-1)
        return np.sqrt(d2)

    def score(self, X, y=None) -> float:
        """Negative inertia of ``X`` under the fitted centroids."""
        return -float(np.sum(self.transform(X).min(1) ** 2))


class DualSpanQA(BaseEstimator):
    """Textless span QA: fine-tune a span model on unit sequences, predict answer times."""

    def __init__(self, n_units: int = 64, max_len: int = 512, layers: int = 4, model_dim: int = 128,
                 heads: int = 4, ffn_dim: int = 512, local_window: int = 32, dropout: float = 0.1,
                 peak_lr: float = 1e-4, warmup_steps: int = 500, total_steps: int = 5000,
                 batch_size: int = 16, eval_every: int = 500, max_answer_len: int = 64, seed: int = 0,
                 donor: SpanModel | None = None, strategy: str = "scratch", freq_ranking=None):
        self.n_units = n_units
        self.max_len = max_len
        self.layers = layers
        self.model_dim = model_dim
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.local_window = local_window
        self.dropout = dropout
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.eval_every = eval_every
        self.max_answer_len = max_answer_len
        self.seed = seed
        self.donor = donor
        self.strategy = strategy
        self.freq_ranking = freq_ranking

    def _model_config(self) -> ModelConfig:
        return ModelConfig(self.n_units, self.max_len, self.layers, self.model_dim, self.heads,
                           self.ffn_dim, self.local_window, self.dropout)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(peak_lr=self.peak_lr, warmup_steps=self.warmup_steps, total_steps=self.total_steps,
                           batch_size=self.batch_size, seed=self.seed, eval_every=self.eval_every,
                           max_answer_len=self.max_answer_len)

    def fit(self, X: Sequence[SqaExample], y=None, dev: Sequence[SqaExample] | None = None, **train_kw):
        """Fine-tune on examples ``X``; ``y`` is ignored (gold spans live on the examples)."""
        cfg = self._model_config()
        model = build_model(cfg, seed=self.seed, donor=self.donor, strategy=self.strategy,
                            freq_ranking=self.freq_ranking)
        result: TrainResult = train(prepare_all(X, cfg), model, self._train_config(), dev=dev, **train_kw)
        self.model_ = result.model
        self.train_log_ = result.log
        self.best_step_ = result.best_step
        return self

    def predict(self, X: Sequence[SqaExample]) -> list[TimeSpan]:
        check_is_fitted(self, "model_")
        spans = predict_spans(self.model_, X, self.max_answer_len)
        return [spans[e.id] for e in X]

    def score(self, X: Sequence[SqaExample], y=None) -> float:
        """Macro frame-F1 on ``X``."""
        check_is_fitted(self, "model_")
        return evaluate_model(self.model_, X, self.max_answer_len).ff1

    def evaluate(self, X: Sequence[SqaExample]):
        """Full per-example and aggregate scores on ``X``."""
        check_is_fitted(self, "model_")
        return evaluate_model(self.model_, X, self.max_answer_len)
