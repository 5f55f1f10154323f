"""scikit-learn style wrapper around the two-stage trained model."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import WindowBatch
from .errors import DataError
from .model import (ElboTerms, ForecastResult, NhmmModel, elbo, forecast,
                    forward_log_likelihood, posterior_assignments)
from .training import TrainConfig, train


def _check_signals(signals, n_rows: int, lookback: int) -> Optional[np.ndarray]:
    if signals is None:
        return None
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim == 2:
        signals = signals[:, :, None]
    if signals.ndim != 3 or signals.shape[:2] != (n_rows, lookback):
        raise DataError(f"signals must have shape ({n_rows}, {lookback}, E), got {signals.shape}")
    if not np.all(np.isfinite(signals)):
        raise DataError("signals contain non-finite values")
    return signals


def _batch(X, y=None, signals=None, horizon=None) -> WindowBatch:
    X = check_array(X, dtype=np.float64)
    n = X.shape[0]
    if y is None:
        future = np.full((n, horizon), np.nan)
    else:
        future = check_array(y, dtype=np.float64, ensure_2d=False)
        if future.ndim == 1:
            future = future[:, None]
        if future.shape[0] != n:
            raise DataError(f"X has {n} rows but y has {future.shape[0]}")
    return WindowBatch(
        past_y=X,
        future_y=future,
        past_w=_check_signals(signals, n, X.shape[1]),
        series_ids=np.array([str(i) for i in range(n)], dtype=object),
        origins=np.zeros(n, dtype=np.int64),
    )


class NeuralHMMForecaster(RegressorMixin, BaseEstimator):
    """Discrete hidden-state forecaster with neural emission and transition laws.

    ``X`` holds past windows (n_samples, lookback) and ``y`` the aligned
    future windows (n_samples, horizon).  Optional external signals are
    passed as ``signals`` with shape (n_samples, lookback, n_signals).
    ``predict`` returns the exact mixture mean; ``sample`` draws trajectories.
    """

    def __init__(self, n_states: int = 2, hidden_sizes: Sequence[int] = (128, 128),
                 activation: str = "relu", scaler: str = "minmax",
                 signal_states: Optional[Sequence[int]] = None, prior_uses_signal: bool = True,
                 posterior_uses_signal: bool = True, signal_scaling: str = "corpus",
                 learning_rate: float = 5e-4,
                 batch_size: int = 2048, max_epochs: int = 300, patience: int = 10,
                 clip_norm: Optional[float] = 10.0, validation_fraction: float = 0.1,
                 random_state: int = 0):
        self.n_states = n_states
        self.hidden_sizes = hidden_sizes
        self.activation = activation
        self.scaler = scaler
        self.signal_states = signal_states
        self.prior_uses_signal = prior_uses_signal
        self.posterior_uses_signal = posterior_uses_signal
        self.signal_scaling = signal_scaling
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.clip_norm = clip_norm
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, patience=self.patience,
                           clip_norm=self.clip_norm, seed=self.random_state)

    def fit(self, X, y, signals=None, X_val=None, y_val=None, signals_val=None):
        batch = _batch(X, y, signals)
        if X_val is None:
            n_val = max(1, int(round(self.validation_fraction * len(batch))))
            if n_val >= len(batch):
                raise DataError("not enough rows to hold out a validation set")
            train_batch = batch.subset(slice(0, len(batch) - n_val))
            val_batch = batch.subset(slice(len(batch) - n_val, None))
        else:
            train_batch = batch
            val_batch = _batch(X_val, y_val, signals_val)
        n_signals = 0 if batch.past_w is None else batch.past_w.shape[2]
        self.model_ = NhmmModel(
            n_states=self.n_states, horizon=batch.future_y.shape[1], lookback=batch.past_y.shape[1],
            n_signals=n_signals, signal_states=self.signal_states,
            prior_uses_signal=self.prior_uses_signal, posterior_uses_signal=self.posterior_uses_signal,
            signal_scaling=self.signal_scaling, hidden=self.hidden_sizes, activation=self.activation,
            scaler=self.scaler,
            seed=self.random_state,
        )
        self.report_ = train(self.model_, train_batch, val_batch, self._train_config())
        self.n_features_in_ = batch.past_y.shape[1]
        self.horizon_ = batch.future_y.shape[1]
        return self

    @classmethod
    def from_model(cls, model: NhmmModel, **params) -> "NeuralHMMForecaster":
        """Wrap an already trained model (e.g. loaded from a checkpoint)."""
        est = cls(n_states=model.K, hidden_sizes=model.hidden, activation=model.activation,
                  scaler=model.scaler, signal_states=model.signal_states,
                  prior_uses_signal=model.prior_uses_signal,
                  posterior_uses_signal=model.posterior_uses_signal,
                  signal_scaling=model.signal_scaling, random_state=model.seed, **params)
        est.model_ = model
        est.n_features_in_ = model.lookback
        est.horizon_ = model.horizon
        return est

    def forecast(self, X, signals=None, n_traj: int = 0, random_state: int = 0,
                 noise: bool = True) -> ForecastResult:
        check_is_fitted(self, "model_")
        return forecast(self.model_, _batch(X, None, signals, self.horizon_), n_traj,
                        random_state, noise)

    def predict(self, X, signals=None) -> np.ndarray:
        return self.forecast(X, signals).mixture_mean

    def sample(self, X, n_traj: int = 100, signals=None, random_state: int = 0,
               noise: bool = True) -> np.ndarray:
        """Sampled trajectories, shape (n_samples, n_traj, horizon)."""
        return self.forecast(X, signals, n_traj, random_state, noise).trajectories

    def predict_states(self, X, signals=None) -> np.ndarray:
        """Prior marginal probabilities of each hidden state per step."""
        return self.forecast(X, signals).marginals

    def posterior_states(self, X, y, signals=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        return posterior_assignments(self.model_, _batch(X, y, signals))

    def log_likelihood(self, X, y, signals=None) -> np.ndarray:
        """Per-row exact log-likelihood in the scaled space."""
        check_is_fitted(self, "model_")
        return forward_log_likelihood(self.model_, _batch(X, y, signals))

    def elbo(self, X, y, signals=None) -> ElboTerms:
        check_is_fitted(self, "model_")
        return elbo(self.model_, _batch(X, y, signals))
