"""scikit-learn style front-end: normaliser, window classifier and online recogniser."""
from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, clone, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .exceptions import LabelError
from .model import GestureModel, ModelConfig
from .online import ThresholdTable, extract_events, make_engine, stream_recognize
from .pipeline import evaluate_online, fit_thresholds, training_windows
from .skeleton import NO_GESTURE, build_topology, normalize_frames
from .training import TrainConfig, train
from .validation import check_labels, check_stream, check_windows

log = logging.getLogger(__name__)


class SkeletonNormalizer(TransformerMixin, BaseEstimator):
    """Translate each window so the first frame's wrist sits at the origin and scale
    to unit mean bone length. Stateless apart from the topology."""

    def __init__(self, topology=None):
        self.topology = topology

    def fit(self, X, y=None):
        self.topology_ = build_topology(self.topology)
        check_windows(X, self.topology_.joint_count)
        return self

    def transform(self, X):
        check_is_fitted(self, "topology_")
        return normalize_frames(check_windows(X, self.topology_.joint_count), self.topology_)


class GestureClassifier(ClassifierMixin, BaseEstimator):
    """Fixed-length window classifier (S-GCN + temporal transformer encoder).

    ``X`` holds raw windows ``(n, gamma, lambda, 3)`` and ``y`` class names.
    ``NoGesture`` is always the last entry of ``classes_``.
    """

    def __init__(self, classes=None, window=20, sgcn_channels=(64, 128), d_model=128, num_layers=6,
                 heads=8, d_ff=256, dropout=0.3, partition="distance:2", edge_importance=True,
                 topology=None, batch_size=32, learning_rate=1e-3, max_epochs=500, lr_patience=5,
                 early_stop_patience=25, l1_coeff=1e-5, l2_coeff=1e-4, augment=True,
                 noise_sigma=0.001, random_state=0):
        self.classes = classes
        self.window = window
        self.sgcn_channels = sgcn_channels
        self.d_model = d_model
        self.num_layers = num_layers
        self.heads = heads
        self.d_ff = d_ff
        self.dropout = dropout
        self.partition = partition
        self.edge_importance = edge_importance
        self.topology = topology
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.lr_patience = lr_patience
        self.early_stop_patience = early_stop_patience
        self.l1_coeff = l1_coeff
        self.l2_coeff = l2_coeff
        self.augment = augment
        self.noise_sigma = noise_sigma
        self.random_state = random_state

    def _vocabulary(self, y) -> list[str]:
        if self.classes is not None:
            classes = [c for c in self.classes if c != NO_GESTURE]
        else:
            classes = sorted({str(v) for v in y} - {NO_GESTURE})
        return classes + [NO_GESTURE]

    def model_config(self, classes) -> ModelConfig:
        topology = build_topology(self.topology)
        return ModelConfig(classes=tuple(classes), num_joints=topology.joint_count,
                           sgcn_channels=tuple(self.sgcn_channels), d_model=self.d_model,
                           num_layers=self.num_layers, heads=self.heads, d_ff=self.d_ff,
                           dropout=self.dropout, partition=self.partition,
                           edge_importance=self.edge_importance, window=self.window)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, initial_lr=self.learning_rate,
                           max_epochs=self.max_epochs, lr_patience=self.lr_patience,
                           early_stop_patience=self.early_stop_patience, l1_coeff=self.l1_coeff,
                           l2_coeff=self.l2_coeff, augment=self.augment, noise_sigma=self.noise_sigma,
                           seed=self.random_state)

    def fit(self, X, y, X_val=None, y_val=None, callback=None):
        y = np.asarray(y)
        if y.dtype.kind in "iu" and self.classes is None:
            raise LabelError("integer labels need an explicit classes list")
        classes = self._vocabulary(y)
        config = self.model_config(classes)
        X = check_windows(X, config.num_joints)
        y_idx = check_labels(y, classes, len(X))
        if X_val is not None:
            X_val = check_windows(X_val, config.num_joints, "X_val")
            y_val = check_labels(y_val, classes, len(X_val))
        model = GestureModel.create(config, build_topology(self.topology), seed=self.random_state)
        self.model_, self.history_ = train(model, X, y_idx, X_val, y_val, self.train_config(), callback)
        self.classes_ = np.array(classes)
        return self

    @classmethod
    def from_model(cls, model: GestureModel) -> "GestureClassifier":
        """Wrap an already-trained model (e.g. a loaded checkpoint)."""
        cfg = model.config
        est = cls(classes=list(cfg.classes), window=cfg.window, sgcn_channels=cfg.sgcn_channels,
                  d_model=cfg.d_model, num_layers=cfg.num_layers, heads=cfg.heads, d_ff=cfg.d_ff,
                  dropout=cfg.dropout, partition=cfg.partition, edge_importance=cfg.edge_importance,
                  topology=model.topology.to_config())
        est.model_ = model
        est.classes_ = np.array(cfg.classes)
        est.history_ = None
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(check_windows(X, self.model_.config.num_joints))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        self.model_.save(path)

    @classmethod
    def load(cls, path) -> "GestureClassifier":
        return cls.from_model(GestureModel.load(path))


class OnlineGestureRecognizer(BaseEstimator):
    """Sliding-window stream labelling on top of a :class:`GestureClassifier`.

    ``fit`` trains the classifier on windows cut from annotated streams (unless
    it is already fitted) and learns per-class thresholds on the validation
    streams. ``predict`` returns per-frame labels for one stream.
    """

    def __init__(self, classifier=None, window=20, stride=5, engine="batch", memory=None,
                 min_duration=5, merge_gap=None, default_threshold=0.5, min_overlap=0.5):
        self.classifier = classifier
        self.window = window
        self.stride = stride
        self.engine = engine
        self.memory = memory
        self.min_duration = min_duration
        self.merge_gap = merge_gap
        self.default_threshold = default_threshold
        self.min_overlap = min_overlap

    def _classifier(self):
        return self.classifier if self.classifier is not None else GestureClassifier(window=self.window)

    def fit(self, streams, validation_streams=None):
        clf = self._classifier()
        try:
            check_is_fitted(clf, "model_")
        except NotFittedError:
            clf = clone(clf)
            classes = clf._vocabulary([ev.label for s in streams for ev in s.annotations])
            X, y = training_windows(streams, classes, self.window, self.stride, self.min_overlap)
            X_val = y_val = None
            if validation_streams:
                X_val, y_val = training_windows(validation_streams, classes, self.window, self.stride,
                                                self.min_overlap, include_segments=False)
            clf.fit(X, np.asarray(classes)[y], X_val, None if y_val is None else np.asarray(classes)[y_val])
        self.classifier_ = clf
        self.thresholds_ = fit_thresholds(clf.model_, validation_streams or streams, self.window,
                                          self.stride, self.min_overlap, self.default_threshold)
        return self

    def _thresholds(self):
        return getattr(self, "thresholds_", None) or ThresholdTable(default_threshold=self.default_threshold)

    def predict(self, stream) -> list[str]:
        check_is_fitted(self, "classifier_")
        model = self.classifier_.model_
        frames = check_stream(stream, model.config.num_joints)
        engine = make_engine(model, self.engine, self.window, self.memory)
        return stream_recognize(engine, self._thresholds(), frames, self.window, self.stride)

    def predict_events(self, stream):
        gap = self.stride if self.merge_gap is None else self.merge_gap
        return extract_events(self.predict(stream), self.min_duration, gap)

    def evaluate(self, streams, iou_threshold: float = 0.25):
        """MetricsReport over annotated streams."""
        check_is_fitted(self, "classifier_")
        report, _, _ = evaluate_online(self.classifier_.model_, self._thresholds(), streams, self.window,
                                       self.stride, self.engine, self.memory, self.min_duration,
                                       self.merge_gap, iou_threshold)
        return report

    def score(self, streams) -> float:
        """Mean of the Jaccard index over ``streams`` (higher is better)."""
        j = self.evaluate(streams).jaccard_index
        return 0.0 if j is None else j
