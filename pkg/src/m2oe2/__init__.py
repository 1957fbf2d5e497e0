"""Adaptive probabilistic load forecasting with context-driven experts.

The high-level entry points are the scikit-learn style estimators in
:mod:`m2oe2.estimator` and the ``m2oe2`` command line tool; the layers
underneath (autodiff substrate, recurrence, expert machinery, data
pipeline, training, scoring) are importable on their own.
"""

from .config import ModelConfig, RunConfig, TrainConfig
from .estimator import M2oE2Forecaster, PersistenceForecaster
from .gru import ForecastDistribution
from .model import Forecaster

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "RunConfig",
    "Forecaster",
    "ForecastDistribution",
    "M2oE2Forecaster",
    "PersistenceForecaster",
]

__version__ = "0.1.0"
