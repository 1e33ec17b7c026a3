"""scikit-learn style wrapper around training and inference."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import DataError, VideoClip
from .model import ModelConfig
from .optim import lr_schedule
from .train import predict_clip, train, weights_from_checkpoint


def check_clip(X, min_frames: int = 1, name: str = "clip") -> np.ndarray:
    """Validate one clip given as (T, 3, H, W) array-like with values in [0, 1].

    Accepts a :class:`VideoClip` or anything ``np.asarray`` understands and
    returns a float32 array.
    """
    if isinstance(X, VideoClip):
        X = X.array()
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (T, 3, H, W), got {arr.shape}")
    if arr.shape[0] < min_frames:
        raise ValueError(f"{name} needs >= {min_frames} frames, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_clips(X, min_frames: int = 1) -> list[np.ndarray]:
    """A single clip array of rank 4, or a sequence of clips."""
    if isinstance(X, VideoClip) or (isinstance(X, np.ndarray) and X.ndim == 4):
        return [check_clip(X, min_frames)]
    clips = [check_clip(c, min_frames, f"clip {i}") for i, c in enumerate(X)]
    if not clips:
        raise ValueError("no clips given")
    return clips


class GIRNetRegressor(BaseEstimator):
    """Space-time super-resolution estimator.

    ``fit`` takes high-resolution clips (each at least 7 frames and
    ``32 * scale`` pixels on a side) and trains on random degraded patches.
    ``predict`` maps a low-resolution clip of ``n`` frames to ``2n - 1``
    high-resolution frames.
    """

    def __init__(
        self,
        channels=64,
        n_res_extract=9,
        n_res_recon=7,
        attention_kind="attention-2",
        scale=4,
        use_deformable=True,
        use_global_residual=True,
        gstir_use_global_info=True,
        gstir_use_residual=True,
        epochs=1,
        batch_size=8,
        max_steps=None,
        learning_rate=None,
        random_state=0,
    ):
        self.channels = channels
        self.n_res_extract = n_res_extract
        self.n_res_recon = n_res_recon
        self.attention_kind = attention_kind
        self.scale = scale
        self.use_deformable = use_deformable
        self.use_global_residual = use_global_residual
        self.gstir_use_global_info = gstir_use_global_info
        self.gstir_use_residual = gstir_use_residual
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.learning_rate = learning_rate
        self.random_state = random_state

    def _config(self) -> ModelConfig:
        return ModelConfig(
            channels=self.channels,
            n_res_extract=self.n_res_extract,
            n_res_recon=self.n_res_recon,
            attention_kind=self.attention_kind,
            scale=self.scale,
            use_deformable=self.use_deformable,
            use_global_residual=self.use_global_residual,
            gstir_use_global_info=self.gstir_use_global_info,
            gstir_use_residual=self.gstir_use_residual,
        )

    def fit(self, X, y=None):
        """Train on HR clips ``X``; ``y`` is ignored (targets come from the degradation model)."""
        cfg = self._config()
        clips = [(f"clip{i}", VideoClip(list(c))) for i, c in enumerate(check_clips(X, min_frames=7))]
        lr_fn = lr_schedule if self.learning_rate is None else (lambda epoch: self.learning_rate)
        epochs = self.epochs
        if self.max_steps is not None:
            # a step budget wins over the epoch count
            epochs = math.ceil(self.max_steps / math.ceil(len(clips) / self.batch_size))
        result = train(clips, cfg, epochs, self.batch_size, self.random_state, max_steps=self.max_steps, lr_fn=lr_fn)
        self.config_ = cfg
        self.checkpoint_ = result.checkpoint
        self.weights_ = weights_from_checkpoint(result.checkpoint)
        self.loss_curve_ = result.losses
        self.n_iter_ = len(result.losses)
        return self

    def predict(self, X):
        """LR clip (n, 3, h, w) -> HR clip (2n - 1, 3, s*h, s*w); a list of clips gives a list."""
        check_is_fitted(self, "weights_")
        single = isinstance(X, VideoClip) or (isinstance(X, np.ndarray) and X.ndim == 4)
        try:
            clips = check_clips(X, min_frames=2)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        outs = [np.stack(predict_clip(self.weights_, self.config_, list(c))) for c in clips]
        return outs[0] if single else outs

    def score(self, X, y):
        """Mean per-frame PSNR (dB) of ``predict(X)`` against HR clips ``y``."""
        from .metrics import psnr

        preds = self.predict(X)
        targets = check_clips(y)
        if isinstance(preds, np.ndarray):
            preds = [preds]
        values = [psnr(p, t) for pc, tc in zip(preds, targets) for p, t in zip(pc, tc)]
        return float(np.mean(values))
