"""scikit-learn style wrapper around :class:`LightFormer`.

``X`` is an array of image buffers, shape (n, N, C, H, W), values in [0, 1].
``y`` holds one class index per direction, shape (n, 2), with 0 = pass and
1 = stop. The frame size and N are taken from ``X`` at fit time.
"""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig
from .errors import ContractError, ShapeError
from .model import LightFormer
from .training import evaluate, train


def check_buffers(X, buffer_size=None, frame_shape=None):
    """Validate image buffers and return them as float32 (n, N, C, H, W)."""
    try:
        X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    except ValueError as exc:
        raise ShapeError(f"invalid buffers: {exc}") from None
    if X.ndim != 5:
        raise ShapeError(f"buffers must be (n, N, C, H, W), got shape {X.shape}")
    if buffer_size is not None and X.shape[1] != buffer_size:
        raise ContractError(f"image buffer holds {X.shape[1]} frames, model expects N={buffer_size}")
    if frame_shape is not None and X.shape[2:] != tuple(frame_shape):
        raise ShapeError(f"frames must be {tuple(frame_shape)}, got {X.shape[2:]}")
    return X


def check_labels(y, n_samples):
    """Validate (n, 2) pass/stop indices."""
    y = np.asarray(y)
    if y.shape != (n_samples, 2):
        raise ShapeError(f"labels must have shape ({n_samples}, 2), got {y.shape}")
    if y.dtype.kind not in "iub" or np.any((y < 0) | (y > 1)):
        raise ContractError("labels must be 0 (pass) or 1 (stop)")
    return y.astype(np.int64)


class LightFormerClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Two-direction right-of-way classifier.

    ``predict`` returns (n, 2) class indices, ``predict_proba`` (n, 2, 2)
    probabilities and ``transform`` the (n, D) embeddings fed to the decoders.
    ``score`` is the fraction of samples with both directions right.
    """

    def __init__(self, embed_dim=32, num_heads=2, num_points=2, centres_per_class=1,
                 history_mode="all", margin=0.5, scale=64.0, stem_width=8,
                 stage_widths=(8, 16, 32, 64), ablate_tsa=False, epochs=15,
                 learning_rate=1e-4, batch_size=4, random_state=0):
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.num_points = num_points
        self.centres_per_class = centres_per_class
        self.history_mode = history_mode
        self.margin = margin
        self.scale = scale
        self.stem_width = stem_width
        self.stage_widths = stage_widths
        self.ablate_tsa = ablate_tsa
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def _model_config(self, X):
        _, n, c, h, w = X.shape
        return ModelConfig(
            buffer_size=n, embed_dim=self.embed_dim, num_heads=self.num_heads,
            num_points=self.num_points, history_mode=self.history_mode,
            centres_per_class=self.centres_per_class, margin=self.margin, scale=self.scale,
            in_channels=c, stem_width=self.stem_width, stage_widths=tuple(self.stage_widths),
            blocks_per_stage=(2,) * len(self.stage_widths), image_height=h, image_width=w,
            ablate_tsa=self.ablate_tsa, seed=self.random_state)

    def fit(self, X, y, checkpoint_path=None):
        X = check_buffers(X)
        y = check_labels(y, len(X))
        self.model_ = LightFormer(self._model_config(X))
        cfg = TrainConfig(epochs=self.epochs, learning_rate=self.learning_rate,
                          batch_size=self.batch_size, seed=self.random_state)
        result = train(self.model_, X, y, cfg, checkpoint_path=checkpoint_path)
        self.history_ = result.history
        self.classes_ = np.array([0, 1])
        return self

    def _checked(self, X):
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        return check_buffers(X, cfg.buffer_size, (cfg.in_channels, cfg.image_height, cfg.image_width))

    def predict(self, X):
        X = self._checked(X)
        return self.model_.predict(X)

    def predict_proba(self, X):
        X = self._checked(X)
        return self.model_.predict_proba(X)

    def transform(self, X):
        X = self._checked(X)
        with T.no_grad():
            return self.model_.forward(X).embedding.data.copy()

    def score(self, X, y, sample_weight=None):
        pred = self.predict(X)
        y = check_labels(y, len(pred))
        hits = np.all(pred == y, axis=1).astype(float)
        return float(np.average(hits, weights=sample_weight))

    def report(self, X, y):
        """Per-status accuracy, precision, recall and F1."""
        X = self._checked(X)
        return evaluate(self.model_, X, check_labels(y, len(X)))

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(self.model_, path)

    @classmethod
    def from_checkpoint(cls, path):
        model = load_checkpoint(path)
        cfg = model.config
        est = cls(embed_dim=cfg.embed_dim, num_heads=cfg.num_heads, num_points=cfg.num_points,
                  centres_per_class=cfg.centres_per_class, history_mode=cfg.history_mode,
                  margin=cfg.margin, scale=cfg.scale, stem_width=cfg.stem_width,
                  stage_widths=cfg.stage_widths, ablate_tsa=cfg.ablate_tsa, random_state=cfg.seed)
        est.model_ = model
        est.history_ = []
        est.classes_ = np.array([0, 1])
        return est
