"""
scikit-learn style wrappers.

``PuYunForecaster.fit(dataset)`` pre-trains (and optionally fine-tunes) a
model; ``predict(X)`` maps an array of input pairs ``[N, 2, C, H, W]`` to the
next states ``[N, C, H, W]``; ``forecast(X, n_steps)`` rolls out
``[N, n_steps, C, H, W]``. Arrays are in normalised units.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Dataset
from .errors import ConfigError, ShapeError
from .evaluation import rmse
from .forecast import cascade_rollout, rollout
from .grid import make_grid, VariableSet
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import (TrainConfig, finetune_cascade_medium, finetune_dynamic_steps,
                       pretrain_single_step)


def check_pairs(X, config: ModelConfig) -> np.ndarray:
    """Validate an array of input pairs against a model config."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 4:
        X = X[None]
    expected = (2, config.n_vars) + config.grid.shape
    if X.ndim != 5 or X.shape[1:] != expected:
        raise ShapeError(f"expected pairs shaped [N, {', '.join(map(str, expected))}], got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("input pairs contain NaN or Inf")
    return X


def check_dataset(X) -> Dataset:
    if not isinstance(X, Dataset):
        raise TypeError(f"fit expects a puyun Dataset, got {type(X).__name__}")
    return X


class PuYunForecaster(BaseEstimator):
    """Single PuYun model: single-step pre-training plus optional dynamic-step fine-tuning."""

    def __init__(self, embed_dim=64, blocks_per_stage=(2, 2, 2, 2), kernel_size=5,
                 lka_mode="decomposed", patch=4, merge="pixelshuffle+resize",
                 droppath_rate=0.0, lr=1e-3, betas=(0.9, 0.95), weight_decay=0.1,
                 n_iter=2000, batch_size=4, finetune_iter=0, finetune_lr=1e-4,
                 max_autoreg_steps=6, n_workers=4, random_state=0):
        self.embed_dim = embed_dim
        self.blocks_per_stage = blocks_per_stage
        self.kernel_size = kernel_size
        self.lka_mode = lka_mode
        self.patch = patch
        self.merge = merge
        self.droppath_rate = droppath_rate
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.finetune_iter = finetune_iter
        self.finetune_lr = finetune_lr
        self.max_autoreg_steps = max_autoreg_steps
        self.n_workers = n_workers
        self.random_state = random_state

    def _model_config(self, dataset: Dataset) -> ModelConfig:
        return ModelConfig(embed_dim=self.embed_dim, blocks_per_stage=tuple(self.blocks_per_stage),
                           kernel_K=self.kernel_size, lka_mode=self.lka_mode, patch=self.patch,
                           merge=self.merge, droppath_rate=self.droppath_rate,
                           variables=dataset.variables, grid=dataset.grid)

    def _train_config(self, **kw) -> TrainConfig:
        base = dict(lr=self.lr, betas=self.betas, weight_decay=self.weight_decay,
                    iterations=self.n_iter, batch_size=self.batch_size, seed=self.random_state)
        base.update(kw)
        return TrainConfig(**base)

    def fit(self, X, y=None):
        dataset = check_dataset(X)
        self.config_ = self._model_config(dataset)
        self.params_, self.loss_trace_ = pretrain_single_step(
            dataset, self.config_, self._train_config())
        self.finetune_trace_ = []
        if self.finetune_iter:
            self.finetune(dataset)
        self.n_features_in_ = self.config_.n_vars
        return self

    def finetune(self, X, n_iter=None, max_autoreg_steps=None):
        """Dynamic-step autoregressive fine-tuning of the fitted model."""
        check_is_fitted(self, "params_")
        dataset = check_dataset(X)
        cfg = self._train_config(
            lr=self.finetune_lr, iterations=n_iter or self.finetune_iter,
            max_autoreg_steps=max_autoreg_steps or self.max_autoreg_steps,
            n_workers=self.n_workers, batch_size=1, loss="mse")
        self.params_, trace = finetune_dynamic_steps(self.params_, dataset, cfg, self.config_)
        self.finetune_trace_ = getattr(self, "finetune_trace_", []) + trace
        return self

    def predict(self, X):
        return self.forecast(X, 1)[:, 0]

    def forecast(self, X, n_steps=1):
        check_is_fitted(self, "params_")
        X = check_pairs(X, self.config_)
        return np.stack([rollout(self.params_, (x[0], x[1]), n_steps, self.config_).values
                         for x in X])

    def score(self, X, y):
        """Negative latitude-weighted one-step RMSE averaged over channels."""
        pred = self.predict(X)
        y = np.asarray(y, dtype=np.float32).reshape(pred.shape)
        return -float(rmse(pred[:, None], y[:, None], self.config_.grid).mean())

    def save(self, path) -> str:
        check_is_fitted(self, "params_")
        return save_checkpoint(path, self.params_, self.config_, self.random_state)

    @classmethod
    def from_checkpoint(cls, path) -> "PuYunForecaster":
        params, config, manifest = load_checkpoint(path)
        est = cls(embed_dim=config.embed_dim, blocks_per_stage=config.blocks_per_stage,
                  kernel_size=config.kernel_K, lka_mode=config.lka_mode, patch=config.patch,
                  merge=config.merge, droppath_rate=config.droppath_rate,
                  random_state=manifest.get("seed", 0))
        est.params_, est.config_ = params, config
        est.n_features_in_ = config.n_vars
        return est


class PuYunCascade(BaseEstimator):
    """Short model for steps 1..handoff, Medium model afterwards.

    ``fit`` builds Medium by fine-tuning a copy of the fitted Short model on
    Short's own rollouts.
    """

    def __init__(self, short=None, handoff=10, n_iter=500, lr=1e-4, max_autoreg_steps=6,
                 n_workers=4, stride=1, random_state=0):
        self.short = short
        self.handoff = handoff
        self.n_iter = n_iter
        self.lr = lr
        self.max_autoreg_steps = max_autoreg_steps
        self.n_workers = n_workers
        self.stride = stride
        self.random_state = random_state

    def fit(self, X, y=None):
        dataset = check_dataset(X)
        if self.short is None:
            raise ConfigError("PuYunCascade needs a fitted short model")
        check_is_fitted(self.short, "params_")
        cfg = TrainConfig(lr=self.lr, betas=self.short.betas, weight_decay=self.short.weight_decay,
                          iterations=self.n_iter, max_autoreg_steps=self.max_autoreg_steps,
                          n_workers=self.n_workers, seed=self.random_state, loss="mse")
        self.medium_params_, self.trace_, _ = finetune_cascade_medium(
            self.short.params_, dataset, cfg, self.short.config_, self.handoff, self.stride)
        return self

    def forecast(self, X, n_steps):
        check_is_fitted(self, "medium_params_")
        X = check_pairs(X, self.short.config_)
        return np.stack([cascade_rollout(self.short.params_, self.medium_params_, (x[0], x[1]),
                                         n_steps, self.handoff, self.short.config_).values
                         for x in X])


def desk_dataset(T_steps: int = 800, seed: int = 0, n_lat: int = 33, n_lon: int = 64):
    """Synthetic dataset on the default desk grid and channel set."""
    from .data import generate_synthetic
    return generate_synthetic(make_grid(n_lat, n_lon), VariableSet.desk(), T_steps, seed)
