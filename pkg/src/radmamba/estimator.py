"""scikit-learn style wrapper around the classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .data import Dataset
from .model import ModelConfig, ProjectionKind, RadMamba
from .preprocess import ChanDsConfig, PatchGeometry
from .tensor import no_grad
from .train import TrainConfig, predict_logits, train

__all__ = ["RadMambaClassifier", "check_spectrograms"]


def check_spectrograms(X, input_shape: tuple[int, int, int] | None = None) -> np.ndarray:
    """Validate a stack of spectrograms and return it as float32 (n, C, H, W).

    A 3-D array is read as single-channel (n, H, W).
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected spectrograms shaped (n, C, H, W) or (n, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("found an empty spectrogram stack")
    if not np.all(np.isfinite(X)):
        raise ValueError("spectrograms contain NaN or infinity")
    if input_shape is not None and tuple(X.shape[1:]) != tuple(input_shape):
        raise ValueError(f"spectrograms of shape {X.shape[1:]} do not match the fitted input shape {tuple(input_shape)}")
    return X


class RadMambaClassifier(ClassifierMixin, BaseEstimator):
    """Spectrogram classifier with the usual ``fit`` / ``predict`` interface.

    Hyperparameters mirror :class:`ModelConfig` and :class:`TrainConfig`.  The
    input shape and class count are taken from the data passed to ``fit``.
    ``transform`` returns the pooled sequence features fed to the head.
    """

    def __init__(
        self,
        dim: int = 16,
        d_state: int = 16,
        dt_rank: int = 4,
        projection: str = "conv1d_k3",
        depth: int = 1,
        geometry: str = "doppler_aligned",
        rect_size: tuple[int, int] = (7, 7),
        ds_factors: tuple[int, int] = (2, 32),
        fusion_blocks: int = 1,
        fused_channels: int = 1,
        discretization: str = "zoh",
        lr0: float = 4e-3,
        batch_size: int = 16,
        epochs: int = 10,
        weight_decay: float = 0.01,
        patience: int = 5,
        random_state: int = 0,
    ):
        self.dim = dim
        self.d_state = d_state
        self.dt_rank = dt_rank
        self.projection = projection
        self.depth = depth
        self.geometry = geometry
        self.rect_size = rect_size
        self.ds_factors = ds_factors
        self.fusion_blocks = fusion_blocks
        self.fused_channels = fused_channels
        self.discretization = discretization
        self.lr0 = lr0
        self.batch_size = batch_size
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.patience = patience
        self.random_state = random_state

    def _model_config(self, input_shape, n_classes) -> ModelConfig:
        geom = PatchGeometry.rectangular(*self.rect_size) if self.geometry == "rectangular" else PatchGeometry(self.geometry)
        return ModelConfig(
            input_shape=input_shape,
            chan_ds=ChanDsConfig(self.fusion_blocks, self.fused_channels, (3, 3), tuple(self.ds_factors)),
            geometry=geom,
            dim=self.dim,
            d_state=self.d_state,
            dt_rank=self.dt_rank,
            projection=ProjectionKind.parse(self.projection),
            depth=self.depth,
            n_classes=n_classes,
            discretization=self.discretization,
            seed=self.random_state,
        ).validate()

    def fit(self, X, y, X_val=None, y_val=None):
        """Train from scratch.  An optional validation set drives the scheduler."""
        X = check_spectrograms(X)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError(f"y must be 1-D with {len(X)} entries, got shape {y.shape}")
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit a classifier")
        y_idx = np.searchsorted(self.classes_, y)
        names = [str(c) for c in self.classes_]
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = tuple(X.shape[1:])
        cfg = self._model_config(self.input_shape_, len(self.classes_))
        tcfg = TrainConfig(
            lr0=self.lr0,
            batch_size=self.batch_size,
            epochs=self.epochs,
            weight_decay=self.weight_decay,
            patience=self.patience,
        )
        tr = Dataset(X, y_idx, names, ids=[f"train/{i}" for i in range(len(X))])
        te = None
        if X_val is not None:
            Xv = check_spectrograms(X_val, self.input_shape_)
            yv = np.asarray(y_val)
            if not np.all(np.isin(yv, self.classes_)):
                raise ValueError("validation labels contain classes unseen in y")
            te = Dataset(Xv, np.searchsorted(self.classes_, yv), names, ids=[f"val/{i}" for i in range(len(Xv))])
        self.report_, self.model_ = train(cfg, tr, te, tcfg, self.random_state)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_spectrograms(X, self.input_shape_)
        return predict_logits(self.model_, X)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_spectrograms(X, self.input_shape_)
        with no_grad():
            return np.concatenate([self.model_.features(X[i : i + 64]).data for i in range(0, len(X), 64)])

    @classmethod
    def from_model(cls, model: RadMamba, classes=None) -> "RadMambaClassifier":
        """Wrap an already trained model (for example one loaded from a checkpoint)."""
        c = model.cfg
        est = cls(
            dim=c.dim,
            d_state=c.d_state,
            dt_rank=c.dt_rank,
            projection=c.projection.value,
            depth=c.depth,
            geometry=c.geometry.kind,
            rect_size=c.geometry.size or (7, 7),
            ds_factors=c.chan_ds.factors,
            fusion_blocks=c.chan_ds.n_blocks,
            fused_channels=c.chan_ds.channels,
            discretization=c.discretization,
            random_state=c.seed,
        )
        est.model_ = model
        est.classes_ = np.arange(c.n_classes) if classes is None else np.asarray(classes)
        est.input_shape_ = c.input_shape
        est.n_features_in_ = int(np.prod(c.input_shape))
        return est
