"""scikit-learn wrapper: one block as a next-step sequence forecaster."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .eval import RolloutConfig, ar_mse, ar_rollout
from .ssm_core import ModelDims, Routing, Variant
from .train import TrainConfig, tf_eval_loss, train_series
from .tasks import TrajectorySet
from .variants import ModelSpec, check_routing

__all__ = ["SSMForecaster", "check_series"]


def check_series(X, d_model: int | None = None, min_len: int = 2) -> np.ndarray:
    """Validate a batch of trajectories as a float64 (n, T, d_model) array.

    A single 2-D trajectory is promoted to a batch of one.
    """
    X = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected (n_trajectories, T, d_model) input, got shape {X.shape}")
    if X.shape[1] < min_len:
        raise ValueError(f"trajectories need at least {min_len} steps, got {X.shape[1]}")
    if d_model is not None and X.shape[2] != d_model:
        raise ValueError(f"expected {d_model} channels, got {X.shape[2]}")
    return X


class SSMForecaster(RegressorMixin, BaseEstimator):
    """Next-step forecaster built on a single selective SSM block.

    ``fit(X)`` takes trajectories ``X`` (n, T, d_model) and learns
    ``X[:, t] -> X[:, t + 1]`` on the ``state_channels`` under teacher
    forcing; the other channels are treated as exogenous inputs.
    ``predict(X)`` returns teacher-forced next-step predictions and
    :meth:`rollout` runs the closed-loop forecast.
    """

    def __init__(self, variant="seq-bim", routing="full", d_state=8, d_inner=None, context=50,
                 state_channels=(0,), iterations=2000, batch_size=64, lr_start=1e-3, lr_end=1e-5,
                 bilinear_init_std=0.5, grad_clip=None, method="sequential", random_state=0):
        self.variant = variant
        self.routing = routing
        self.d_state = d_state
        self.d_inner = d_inner
        self.context = context
        self.state_channels = state_channels
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.bilinear_init_std = bilinear_init_std
        self.grad_clip = grad_clip
        self.method = method
        self.random_state = random_state

    def _spec(self, d_model: int) -> ModelSpec:
        variant, routing = check_routing(Variant(self.variant), Routing(self.routing))
        dims = ModelDims(d_model=d_model, d_state=self.d_state, d_inner=self.d_inner, context=self.context)
        return ModelSpec(variant, dims, routing)

    def _channels(self, d_model: int) -> list[int]:
        ch = [int(c) for c in self.state_channels]
        if not ch or any(not 0 <= c < d_model for c in ch):
            raise ValueError(f"state_channels {self.state_channels} out of range for {d_model} channels")
        return ch

    def fit(self, X, y=None):
        """Train on trajectories ``X``; ``y`` is ignored (targets are ``X`` shifted by one)."""
        X = check_series(X, min_len=self.context + 1)
        spec = self._spec(X.shape[2])
        channels = self._channels(X.shape[2])
        cfg = TrainConfig(
            iterations=self.iterations, batch_size=self.batch_size, lr_start=self.lr_start,
            lr_end=self.lr_end, seed=int(self.random_state), bilinear_init_std=self.bilinear_init_std,
            grad_clip=self.grad_clip, method=self.method,
        )
        self.params_, self.log_ = train_series(spec, X, channels, cfg, bilinear_std=self.bilinear_init_std)
        self.spec_ = spec
        self.n_features_in_ = X.shape[2]
        self.diverged_ = self.log_.diverged
        return self

    def predict(self, X):
        """Teacher-forced next-step predictions, (n, T, d_model), for inputs ``X``."""
        check_is_fitted(self, "params_")
        X = check_series(X, self.n_features_in_, min_len=1)
        return self.spec_.forward(self.params_, X).value

    def rollout(self, X, total=None, warmup=None, feedback="state"):
        """Closed-loop forecast; see :func:`bilinear_ssm.eval.ar_rollout` for indexing."""
        check_is_fitted(self, "params_")
        X = check_series(X, self.n_features_in_)
        cfg = RolloutConfig(total=total or X.shape[1], warmup=warmup, count=len(X), feedback=feedback)
        pred, _ = ar_rollout(self.spec_, self.params_, X, self._channels(X.shape[2]), cfg)
        return pred

    def rollout_mse(self, X, total=None, warmup=None) -> float:
        X = check_series(X, getattr(self, "n_features_in_", None))
        total = total or X.shape[1]
        pred = self.rollout(X, total, warmup)
        w = self.context - 1 if warmup is None else warmup
        return ar_mse(pred, X[:, :total], self._channels(X.shape[2]), w)

    def score(self, X, y=None):
        """Negative teacher-forced next-step MSE on the state channels (higher is better)."""
        check_is_fitted(self, "params_")
        X = check_series(X, self.n_features_in_)
        return -tf_eval_loss(self.spec_, self.params_, TrajectorySet(X, 0), self._channels(X.shape[2]))
