"""scikit-learn style wrapper around model construction, training and inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autograd as ag
from .autograd import Var
from .data import Dataset
from .model import ModelConfig, build_model, infer
from .training import TrainConfig, as_sequence, fit, predict_logits


def check_images(X, image_shape=None, allow_time: bool = True) -> np.ndarray:
    """Coerce ``X`` to float32 images (n, C, H, W), or (n, T, C, H, W) event frames.

    Flat (n, C*H*W) rows are reshaped with ``image_shape``; a 3-D (n, H, W)
    array is read as single-channel.
    """
    X = np.asarray(X)
    if X.ndim == 2:
        if image_shape is None:
            raise ValueError("flat input needs image_shape=(C, H, W)")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != int(np.prod(image_shape)):
            raise ValueError(f"rows of length {X.shape[1]} do not match image_shape {tuple(image_shape)}")
        return X.reshape(len(X), *image_shape)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim == 5 and not allow_time:
        raise ValueError("time-resolved input is not accepted here")
    if X.ndim not in (4, 5):
        raise ValueError(f"expected 2-D to 5-D image input, got {X.ndim}-D")
    X = check_array(X, dtype=np.float32, allow_nd=True)
    if len(X) == 0:
        raise ValueError("empty input")
    return X


def _normalize_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class BSViTClassifier(ClassifierMixin, BaseEstimator):
    """Burst-spiking vision transformer classifier.

    ``engine`` selects how ``predict`` runs the trained network: ``"graph"``
    uses the batched float graph in eval mode, ``"spike"`` the per-sample
    addition-only engine (and records an energy ledger per sample in
    ``ledgers_``).
    """

    def __init__(self, image_shape=None, timesteps=2, depth=1, dim=32, heads=1, mlp_ratio=4,
                 n_max=4, mask_enabled=True, attention="dbssa", stem_pools=2, epochs=50,
                 batch_size=64, lr=2e-3, warmup_epochs=2, weight_decay=0.05, smoothing=0.1,
                 target_acc=None, engine="graph", random_state=0):
        self.image_shape = image_shape
        self.timesteps = timesteps
        self.depth = depth
        self.dim = dim
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.n_max = n_max
        self.mask_enabled = mask_enabled
        self.attention = attention
        self.stem_pools = stem_pools
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.smoothing = smoothing
        self.target_acc = target_acc
        self.engine = engine
        self.random_state = random_state

    def _model_config(self, X: np.ndarray, n_classes: int) -> ModelConfig:
        C, H, W = X.shape[-3:]
        return ModelConfig(in_channels=C, height=H, width=W, timesteps=self.timesteps, depth=self.depth,
                           dim=self.dim, mlp_ratio=self.mlp_ratio, heads=self.heads, n_max=self.n_max,
                           mask_enabled=self.mask_enabled, attention=self.attention,
                           stem_pools=self.stem_pools, num_classes=n_classes,
                           seed=int(self.random_state or 0))

    def fit(self, X, y):
        if self.engine not in ("graph", "spike"):
            raise ValueError(f"engine must be 'graph' or 'spike', got {self.engine!r}")
        X = check_images(X, self.image_shape)
        _, y = check_X_y(X.reshape(len(X), -1), y)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.model_ = build_model(self._model_config(X, len(self.classes_)))
        train_cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                                warmup_epochs=self.warmup_epochs, weight_decay=self.weight_decay,
                                smoothing=self.smoothing, seed=int(self.random_state or 0),
                                target_acc=self.target_acc)
        self.history_ = fit(self.model_, Dataset(X, y_enc, len(self.classes_)), train_cfg)
        return self

    def _check_input(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_shape)
        if int(np.prod(X.shape[1:])) != self.n_features_in_:
            raise ValueError(f"X has {int(np.prod(X.shape[1:]))} features, expected {self.n_features_in_}")
        return X

    def decision_function(self, X) -> np.ndarray:
        X = self._check_input(X)
        if self.engine == "spike":
            self.model_.eval()
            logits = []
            self.ledgers_ = []
            for img in X:
                logits.append(infer(self.model_, img))
                self.ledgers_.append(self.model_.last_ledger)
            return np.stack(logits)
        return predict_logits(self.model_, X)

    def predict_proba(self, X) -> np.ndarray:
        return _normalize_softmax(self.decision_function(X).astype(np.float64))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, ("model_", "classes_"))
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class SpikeFeatureExtractor(TransformerMixin, BaseEstimator):
    """Mean final-block firing rates per channel from a fitted ``BSViTClassifier``."""

    def __init__(self, classifier: BSViTClassifier | None = None):
        self.classifier = classifier

    def fit(self, X, y=None):
        if self.classifier is None:
            raise ValueError("a classifier is required")
        check_is_fitted(self.classifier, "model_")
        self.n_features_in_ = self.classifier.n_features_in_
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_features_in_")
        clf = self.classifier
        X = clf._check_input(X)
        model = clf.model_
        model.eval()
        with ag.no_grad():
            s = model.encode(Var(as_sequence(X, model.config.timesteps))).data
        return s.mean(axis=(1, 2))
