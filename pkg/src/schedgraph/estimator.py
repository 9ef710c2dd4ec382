"""Estimator facade over the training pipeline.

Wraps model + trainer in a scikit-learn style object: construct with
hyperparameters, ``fit`` on one or more labeled traces, then ``predict``
or ``score_samples`` per task.  Scores follow the trace convention
(higher means more likely anomalous, predicted label 1 flags an anomaly),
not the sign convention of scikit-learn's outlier detectors.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import compute_metrics, rank_auc
from .multiscale import DEFAULT_SCALES
from .training import (
    ModelConfig,
    TrainConfig,
    build_pipeline,
    score_slices,
    train,
)
from .workload import ScheduleTrace


class ScheduleAnomalyDetector(BaseEstimator):
    """Supervised anomaly scorer for scheduler execution traces.

    A task may appear in several time slices; its task-level score is the
    maximum slice score.  Tasks that no window covers (possible when
    stride exceeds window_len) score 0 and are never flagged.

    Labels come from the traces themselves, so ``fit`` takes ``y=None``.
    """

    def __init__(self, window_len=30.0, stride=15.0, d_task=8, d_res=8,
                 d_time=8, hash_buckets=1024, n_resource_dims=2, seq_k=2,
                 coexist_eps=None, tau=None, mu=(0.25, 0.5, 0.25),
                 scales=DEFAULT_SCALES, d_a=None, lambda1=0.1, lambda2=0.1,
                 gamma1=0.1, gamma2=0.1, attention=True, fusion=True,
                 multiscale=True, lr=1e-4, batch_size=32, epochs=300,
                 weight_decay=1e-5, dropout=0.3, eval_every=10,
                 val_fraction=0.2, threshold=0.5, seed=0):
        self.window_len = window_len
        self.stride = stride
        self.d_task = d_task
        self.d_res = d_res
        self.d_time = d_time
        self.hash_buckets = hash_buckets
        self.n_resource_dims = n_resource_dims
        self.seq_k = seq_k
        self.coexist_eps = coexist_eps
        self.tau = tau
        self.mu = mu
        self.scales = scales
        self.d_a = d_a
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.attention = attention
        self.fusion = fusion
        self.multiscale = multiscale
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.eval_every = eval_every
        self.val_fraction = val_fraction
        self.threshold = threshold
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            window_len=self.window_len, stride=self.stride, d_task=self.d_task,
            d_res=self.d_res, d_time=self.d_time, hash_buckets=self.hash_buckets,
            n_resource_dims=self.n_resource_dims, seq_k=self.seq_k,
            coexist_eps=self.coexist_eps, tau=self.tau, mu=tuple(self.mu),
            scales=tuple(self.scales), d_a=self.d_a, lambda1=self.lambda1,
            lambda2=self.lambda2, gamma1=self.gamma1, gamma2=self.gamma2,
            attention=self.attention, fusion=self.fusion,
            multiscale=self.multiscale,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
            weight_decay=self.weight_decay, dropout=self.dropout,
            eval_every=self.eval_every, val_fraction=self.val_fraction,
            seed=self.seed,
        )

    @staticmethod
    def _as_traces(X) -> list[ScheduleTrace]:
        if isinstance(X, ScheduleTrace):
            return [X]
        traces = list(X)
        if not traces or not all(isinstance(t, ScheduleTrace) for t in traces):
            raise TypeError(
                "X must be a ScheduleTrace or a non-empty sequence of them")
        return traces

    def fit(self, X, y=None):
        if y is not None:
            raise ValueError("y must be None; labels live on the traces")
        traces = self._as_traces(X)
        model_cfg = self._model_config()
        model_cfg.validate()
        train_cfg = self._train_config()
        train_cfg.validate()
        result = train(traces, model_cfg, train_cfg)
        self.model_config_ = model_cfg
        self.store_ = result.store
        self.history_ = result.history
        self.val_units_ = result.val_units
        self.best_val_auc_ = result.best_val_auc
        return self

    def _task_scores(self, trace: ScheduleTrace) -> np.ndarray:
        pipe = build_pipeline(trace, self.model_config_)
        rows = score_slices(self.store_, self.model_config_, pipe)
        by_task: dict[int, float] = {}
        for task_id, _slice, score, _label in rows:
            by_task[task_id] = max(score, by_task.get(task_id, 0.0))
        return np.array([by_task.get(t.task_id, 0.0) for t in trace.tasks])

    def score_samples(self, X) -> np.ndarray:
        """Per-task anomaly probability, higher meaning more anomalous."""
        check_is_fitted(self, "store_")
        return np.concatenate([self._task_scores(t) for t in self._as_traces(X)])

    def predict_proba(self, X) -> np.ndarray:
        """Columns [normal, anomalous], rows aligned with task order."""
        scores = self.score_samples(X)
        return np.column_stack([1.0 - scores, scores])

    def predict(self, X) -> np.ndarray:
        """Binary labels at the configured threshold (1 = anomalous)."""
        return (self.score_samples(X) >= self.threshold).astype(np.int64)

    def score(self, X, y=None) -> float:
        """Task-level ranking AUC against the traces' own labels."""
        if y is not None:
            raise ValueError("y must be None; labels live on the traces")
        traces = self._as_traces(X)
        scores = self.score_samples(traces)
        labels = np.concatenate([t.labels() for t in traces])
        return rank_auc(scores, labels)

    def evaluation_report(self, X):
        """Full threshold metrics per task, as a MetricsReport."""
        traces = self._as_traces(X)
        scores = self.score_samples(traces)
        labels = np.concatenate([t.labels() for t in traces])
        return compute_metrics(scores, labels, threshold=self.threshold)
