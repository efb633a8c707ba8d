"""scikit-learn style estimator wrapping the counting network."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_model, save_checkpoint
from .model import ModelConfig
from .training import EvalReport, TrainConfig, fit_model, predict_counts, predict_density
from .validation import check_images, check_targets


class GCASUNetCounter(RegressorMixin, BaseEstimator):
    """Exemplar-free object counter.

    ``fit(X, y)`` takes images ``(n, H, W, 3)`` in [0, 1] (square, ``H`` is
    the model input size) and either a sequence of ``(k, 2)`` point arrays or
    density maps ``(n, H, W)``. ``predict`` returns counts; ``predict_density``
    the per-pixel maps.

    Parameters mirror :class:`ModelConfig` and :class:`TrainConfig`;
    ``epochs`` is ``TrainConfig.total_epochs`` and ``random_state`` seeds both
    initialisation and data order.
    """

    def __init__(
        self,
        stages: int = 2,
        patch_size: int = 4,
        embed_dim: int = 32,
        window_size: int = 4,
        heads_per_stage: Tuple[int, ...] = (2, 4),
        depths_per_stage: Tuple[int, ...] = (2, 2),
        bottleneck_heads: int = 8,
        mask_scale_mode: str = "rescaled",
        gcam: bool = True,
        gefs: bool = True,
        gafu: bool = True,
        lr: float = 0.003,
        decay_rate: float = 0.95,
        decay_mode: str = "lr",
        weight_decay: float = 0.01,
        batch_size: int = 8,
        warmup_epochs: int = 5,
        epochs: int = 30,
        loss_scale: float = 1000.0,
        grad_clip: float = 1.0,
        sigma: float = 2.0,
        flip_augment: bool = True,
        random_state: int = 0,
    ):
        self.stages = stages
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.window_size = window_size
        self.heads_per_stage = heads_per_stage
        self.depths_per_stage = depths_per_stage
        self.bottleneck_heads = bottleneck_heads
        self.mask_scale_mode = mask_scale_mode
        self.gcam = gcam
        self.gefs = gefs
        self.gafu = gafu
        self.lr = lr
        self.decay_rate = decay_rate
        self.decay_mode = decay_mode
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.warmup_epochs = warmup_epochs
        self.epochs = epochs
        self.loss_scale = loss_scale
        self.grad_clip = grad_clip
        self.sigma = sigma
        self.flip_augment = flip_augment
        self.random_state = random_state

    def model_config(self, input_size: int) -> ModelConfig:
        return ModelConfig(
            stages=self.stages, patch_size=self.patch_size, embed_dim=self.embed_dim,
            window_size=self.window_size, heads_per_stage=tuple(self.heads_per_stage),
            depths_per_stage=tuple(self.depths_per_stage), bottleneck_heads=self.bottleneck_heads,
            mask_scale_mode=self.mask_scale_mode, gcam=self.gcam, gefs=self.gefs, gafu=self.gafu,
            input_size=input_size,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, decay_rate=self.decay_rate, decay_mode=self.decay_mode,
            weight_decay=self.weight_decay, batch_size=self.batch_size,
            warmup_epochs=self.warmup_epochs, total_epochs=self.epochs, seed=self.random_state,
            loss_scale=self.loss_scale, grad_clip=self.grad_clip, sigma=self.sigma,
            flip_augment=self.flip_augment,
        )

    def fit(self, X, y, eval_set: Optional[Tuple[np.ndarray, Sequence]] = None):
        X = check_images(X)
        n, size = X.shape[0], X.shape[1]
        dens = check_targets(y, n, size, size, self.sigma)
        val = None
        if eval_set is not None:
            Xv = check_images(eval_set[0], size)
            val = (Xv, check_targets(eval_set[1], len(Xv), size, size, self.sigma).astype(np.float64).sum(axis=(1, 2)))
        self.config_ = self.model_config(size)
        self.train_config_ = self.train_config()
        self.model_, self.history_ = fit_model(self.config_, self.train_config_, X, dens, val=val)
        self.input_size_ = size
        return self

    def predict_density(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_density(self.model_, check_images(X, self.input_size_))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_counts(self.model_, check_images(X, self.input_size_))

    def evaluate(self, X, y) -> EvalReport:
        X = check_images(X, self.input_size_)
        true = check_targets(y, len(X), self.input_size_, self.input_size_, self.sigma)
        return EvalReport.from_counts(true.astype(np.float64).sum(axis=(1, 2)), self.predict(X))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(self.model_, self.config_, path)

    @classmethod
    def from_checkpoint(cls, path, **train_params) -> "GCASUNetCounter":
        model = load_model(path)
        cfg = model.cfg
        est = cls(
            stages=cfg.stages, patch_size=cfg.patch_size, embed_dim=cfg.embed_dim,
            window_size=cfg.window_size, heads_per_stage=cfg.heads_per_stage,
            depths_per_stage=cfg.depths_per_stage, bottleneck_heads=cfg.bottleneck_heads,
            mask_scale_mode=cfg.mask_scale_mode, gcam=cfg.gcam, gefs=cfg.gefs, gafu=cfg.gafu,
            **train_params,
        )
        est.model_, est.config_, est.input_size_ = model, cfg, cfg.input_size
        return est
