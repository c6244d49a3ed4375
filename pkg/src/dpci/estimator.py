"""Scikit-learn style front end for the interpolation pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import validation
from .evaluation import evaluate
from .model import InterpolationModel, ModelConfig
from .training import TrainConfig, train


class PointCloudInterpolator(BaseEstimator):
    """Temporal interpolator for dynamic point-cloud sequences.

    `fit` trains the dual-branch alignment/compensation network on one or
    more sequences; `predict` synthesizes the frame at time `t` between two
    endpoint clouds.  Hyperparameters follow the scikit-learn convention
    (set in `__init__`, learned state in trailing-underscore attributes), so
    the estimator composes with `get_params`/`set_params`, `clone`, and
    friends.

    Parameters
    ----------
    k_neighbors : graph degree of the feature embedding.
    width_mult : channel-width multiplier (1.0 is the full-size network).
    learning_rate, epochs, batch_size : optimizer settings.
    k_train : endpoint stride used to build training pairs.
    mixed_training : draw one random in-between target per pair per epoch
        instead of supervising every in-between frame.
    use_norm : per-channel normalization layers on/off.
    seed : seeds initialization, sampling, and shuffling.
    """

    def __init__(self, k_neighbors=20, width_mult=1.0, learning_rate=1e-4, epochs=1000,
                 batch_size=14, k_train=3, mixed_training=False, use_norm=True,
                 renormalize_transpose=False, grad_clip=0.0, seed=0):
        self.k_neighbors = k_neighbors
        self.width_mult = width_mult
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.k_train = k_train
        self.mixed_training = mixed_training
        self.use_norm = use_norm
        self.renormalize_transpose = renormalize_transpose
        self.grad_clip = grad_clip
        self.seed = seed

    def _configs(self):
        model_cfg = ModelConfig(k_neighbors=self.k_neighbors, width_mult=self.width_mult,
                                use_norm=self.use_norm,
                                renormalize_transpose=self.renormalize_transpose)
        train_cfg = TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs,
                                batch_size=self.batch_size, k_train=self.k_train,
                                mixed_training=self.mixed_training, grad_clip=self.grad_clip,
                                seed=self.seed)
        return model_cfg, train_cfg

    def fit(self, X, y=None):
        """Train on X (a Sequence, list of Sequences, or F x N x 3 array)."""
        sequences = validation.as_sequences(X)
        model_cfg, train_cfg = self._configs()
        result = train(sequences, model_cfg=model_cfg, train_cfg=train_cfg)
        self.model_ = result.model
        self.loss_curve_ = result.epoch_losses
        return self

    def predict(self, X, t=0.5):
        """Interpolate between an endpoint pair X = (p0, p1) at time t."""
        self._check_fitted()
        p0, p1 = validation.check_pair(X[0], X[1])
        t = validation.check_time(t)
        picked, _, _ = self.model_.interpolate(p0, p1, t)
        return picked

    def score(self, X, y=None, k_test=None):
        """Negative mean matched-distance error over held-out frames of X."""
        self._check_fitted()
        sequences = validation.as_sequences(X)
        k = k_test or self.k_train
        errs = [evaluate(self.model_, seq, k).mean_emd for seq in sequences]
        return -float(np.mean(errs))

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this PointCloudInterpolator instance is not fitted yet")

    def load_checkpoint(self, path):
        """Adopt trained weights from a checkpoint file without fitting."""
        self.model_ = InterpolationModel.load(path)
        self.loss_curve_ = []
        return self
