"""Scikit-learn style estimators wrapping the forecasting engine.

``fit(y, X)`` consumes the raw load series plus aligned external columns
(in physical units), handles normalization and windowing internally, and
``predict`` returns physical-unit forecasts for the steps following the
fitted series.  Constructor arguments are stored verbatim so
``get_params`` / ``set_params`` / ``clone`` behave as sklearn expects.
"""

from __future__ import annotations

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator

from . import data as datamod
from . import training
from .config import ModelConfig, TrainConfig
from .model import Forecaster
from .validation import as_float_matrix, check_finite, check_positive_int, check_same_length


class M2oE2Forecaster(BaseEstimator):
    """Adaptive probabilistic load forecaster driven by external context.

    A GRU stack consumes inputs projected through a per-step matrix that a
    sparsely gated bank of hypernetwork experts regenerates from the
    external columns; with ``use_experts=False`` the projection is static
    and the estimator is the plain-GRU baseline.
    """

    def __init__(self, horizon=3, hidden_dim=64, proj_dim=40, latent_dim=32,
                 n_layers=4, top_m=2, head="variational", use_experts=True,
                 external_kinds=None, period="1h", learning_rate=1e-3,
                 epochs=300, batch_size=16, kl_weight=0.01, clip_norm=5.0,
                 window_stride=1, mc_samples=100, val_fraction=0.1, seed=0):
        self.horizon = horizon
        self.hidden_dim = hidden_dim
        self.proj_dim = proj_dim
        self.latent_dim = latent_dim
        self.n_layers = n_layers
        self.top_m = top_m
        self.head = head
        self.use_experts = use_experts
        self.external_kinds = external_kinds
        self.period = period
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.kl_weight = kl_weight
        self.clip_norm = clip_norm
        self.window_stride = window_stride
        self.mc_samples = mc_samples
        self.val_fraction = val_fraction
        self.seed = seed

    # ------------------------------------------------------------------

    def _build_dataset(self, y, X):
        y = check_finite("y", as_float_matrix("y", y))
        if X is None:
            X = np.zeros((len(y), 1))
            kinds = ["continuous"]
        else:
            X = check_finite("X", as_float_matrix("X", X))
            check_same_length("y", y, "X", X)
            kinds = list(self.external_kinds) if self.external_kinds is not None \
                else ["continuous"] * X.shape[1]
            if len(kinds) != X.shape[1]:
                raise ValueError(
                    f"external_kinds has {len(kinds)} entries for {X.shape[1]} columns")
        period = pd.Timedelta(self.period)
        stamps = pd.date_range("2000-01-03", periods=len(y), freq=period)
        ds = datamod.TimeSeriesDataset(
            timestamps=pd.DatetimeIndex(stamps), loads=y, externals=X,
            load_names=[f"y{k}" for k in range(y.shape[1])],
            external_names=[f"x{k}" for k in range(X.shape[1])],
            external_kinds=kinds, period=period)
        return ds

    def _model_config(self, n_series, n_externals):
        return ModelConfig(
            n_series=n_series, proj_dim=self.proj_dim, hidden_dim=self.hidden_dim,
            latent_dim=self.latent_dim, n_layers=self.n_layers, horizon=self.horizon,
            n_experts=n_externals, top_m=min(self.top_m, n_externals),
            head=self.head, use_experts=self.use_experts,
            mc_samples=self.mc_samples).validate()

    def _train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate, epochs=self.epochs,
            batch_size=self.batch_size, kl_weight=self.kl_weight, seed=self.seed,
            clip_norm=self.clip_norm, window_stride=self.window_stride,
            val_fraction=self.val_fraction, test_fraction=0.0).validate()

    def fit(self, y, X=None):
        """Train on an aligned (load, externals) history.

        y: (N,) or (N, n_series) loads; X: (N, n_externals) context columns.
        """
        check_positive_int("horizon", self.horizon)
        ds = self._build_dataset(y, X)
        ds.set_splits(1.0 - self.val_fraction, self.val_fraction)
        norm, stats = datamod.normalize(ds)
        cfg = self._model_config(ds.n_series, ds.n_externals)
        model = Forecaster(cfg, seed=self.seed)
        result = training.train_loop(model, norm, self._train_config())
        model.stats_fingerprint = stats.fingerprint()
        self.model_ = model
        self.stats_ = stats
        self.dataset_ = norm
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_series_ = ds.n_series
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def _tail_context(self):
        ds = self.dataset_
        n = len(ds)
        week_len = ds.week_len
        start = (n // week_len - 1) * week_len
        return ds.loads[start:n], ds.externals[start:n]

    def predict_dist(self, n_samples=None, seed=0):
        """Predictive distribution for the steps after the fitted series,
        in normalized units."""
        self._check_fitted()
        loads, ext = self._tail_context()
        rng = np.random.default_rng(seed)
        return self.model_.predict_distribution(loads[None], ext[None],
                                                n_samples=n_samples, rng=rng)[0]

    def predict(self, return_std=False, n_samples=None, seed=0):
        """Physical-unit forecast of the next ``horizon`` steps."""
        dist = self.predict_dist(n_samples=n_samples, seed=seed)
        mean = self.stats_.invert_loads(dist.mean)
        if self.n_series_ == 1:
            mean = mean.ravel()
        if not return_std:
            return mean
        scales = np.array([st.scale for st in self.stats_.loads])
        std = dist.std * scales
        if self.n_series_ == 1:
            std = std.ravel()
        return mean, std


class PersistenceForecaster(BaseEstimator):
    """Repeats the last observed load; the weakest meaningful comparator."""

    def __init__(self, horizon=3):
        self.horizon = horizon

    def fit(self, y, X=None):
        y = check_finite("y", as_float_matrix("y", y))
        self.last_ = y[-1].copy()
        self.n_series_ = y.shape[1]
        return self

    def predict(self, return_std=False):
        if not hasattr(self, "last_"):
            raise RuntimeError("estimator is not fitted; call fit first")
        mean = np.tile(self.last_, (self.horizon, 1))
        if self.n_series_ == 1:
            mean = mean.ravel()
        if not return_std:
            return mean
        return mean, np.zeros_like(mean)
