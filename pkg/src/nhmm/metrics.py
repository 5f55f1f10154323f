"""Point and probabilistic forecast metrics, seasonal naive baseline, subsamples."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, RegressorMixin

from .errors import UndefinedMetricError


def _pair(actual, forecast):
    actual = np.asarray(actual, dtype=np.float64)
    forecast = np.asarray(forecast, dtype=np.float64)
    if actual.shape != forecast.shape:
        raise ValueError(f"length mismatch: actual {actual.shape} vs forecast {forecast.shape}")
    return actual, forecast


def seasonal_scale(insample, m: int) -> float:
    """Mean absolute seasonal difference sum_{i=m+1..T} |Y_i - Y_{i-m}| / (T - m)."""
    insample = np.asarray(insample, dtype=np.float64)
    T = insample.shape[-1]
    if T <= m:
        raise UndefinedMetricError(f"undefined MASE: insample length {T} <= m={m}")
    return float(np.abs(insample[m:] - insample[:-m]).sum() / (T - m))


def mase(actual, forecast, insample, m: int) -> float:
    """Mean absolute scaled error against the in-sample seasonal naive error."""
    actual, forecast = _pair(actual, forecast)
    denom = seasonal_scale(insample, m)
    if denom == 0.0:
        raise UndefinedMetricError("undefined MASE: insample is exactly m-periodic")
    return float(np.abs(actual - forecast).mean() / denom)


def mse(actual, forecast) -> float:
    actual, forecast = _pair(actual, forecast)
    return float(np.mean((actual - forecast) ** 2))


def mae(actual, forecast) -> float:
    actual, forecast = _pair(actual, forecast)
    return float(np.mean(np.abs(actual - forecast)))


def snaive(insample, m: int, h: int) -> np.ndarray:
    """Repeat the last observed seasonal period up to ``h`` steps."""
    insample = np.asarray(insample, dtype=np.float64)
    if insample.shape[-1] < m:
        raise ValueError(f"seasonal naive needs at least m={m} values, got {insample.shape[-1]}")
    last = insample[..., -m:]
    return last[..., np.arange(h) % m]


class SeasonalNaive(RegressorMixin, BaseEstimator):
    """Seasonal naive forecaster over rows of past windows (needs lookback >= m)."""

    def __init__(self, seasonality: int = 1, horizon: int = 1):
        self.seasonality = seasonality
        self.horizon = horizon

    def fit(self, X, y=None):
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def predict(self, X):
        return snaive(np.asarray(X, dtype=np.float64), self.seasonality, self.horizon)


def build_subsamples(ids: Sequence[str], snaive_mases: Sequence[float], n: int = 1000) -> dict:
    """Top-``n`` (non-stationary) and bottom-``n`` (stationary) series by seasonal naive MASE.

    Series with an undefined score are excluded and listed under ``excluded``.
    Ties break on series id.
    """
    scores = [(str(i), math.nan if v is None else float(v)) for i, v in zip(ids, snaive_mases)]
    excluded = sorted(i for i, v in scores if not math.isfinite(v))
    valid = [(i, v) for i, v in scores if math.isfinite(v)]
    if len(valid) < 2 * n:
        raise ValueError(f"need at least {2 * n} scored series, got {len(valid)}")
    top = sorted(valid, key=lambda iv: (-iv[1], iv[0]))[:n]
    bottom = sorted(valid, key=lambda iv: (iv[1], iv[0]))[:n]
    return {
        "non_stationary": [i for i, _ in top],
        "stationary": [i for i, _ in bottom],
        "excluded": excluded,
    }


def trajectory_mases(actual, trajectories, insample, m: int) -> np.ndarray:
    """MASE of each sampled trajectory (n_traj, h) against one actual window."""
    trajectories = np.asarray(trajectories, dtype=np.float64)
    denom = seasonal_scale(insample, m)
    if denom == 0.0:
        raise UndefinedMetricError("undefined MASE: insample is exactly m-periodic")
    return np.abs(trajectories - np.asarray(actual, dtype=np.float64)).mean(axis=-1) / denom


@dataclass
class EvalReport:
    per_series: pd.DataFrame
    summary: dict = field(default_factory=dict)
    subsamples: Optional[dict] = None

    def to_dict(self) -> dict:
        return {"summary": self.summary, "subsamples": self.subsamples}


def summarize(per_series: pd.DataFrame, metrics: Sequence[str], subsamples: Optional[dict] = None) -> dict:
    summary = {"n_series": int(len(per_series))}
    groups = {"all": per_series}
    if subsamples:
        ids = per_series["series_id"]
        groups["non_stationary"] = per_series[ids.isin(subsamples["non_stationary"])]
        groups["stationary"] = per_series[ids.isin(subsamples["stationary"])]
    for name, frame in groups.items():
        for col in metrics:
            if col in frame:
                summary[f"{name}.{col}"] = float(frame[col].mean())
    return summary


def trajectory_score(actuals, trajectories, insamples, m: int, ids=None) -> dict:
    """Per-series mean/std of trajectory MASEs and their corpus averages.

    ``trajectories[i]`` is (n_traj, h) for series ``i``.
    """
    means, stds = [], []
    for actual, traj, ins in zip(actuals, trajectories, insamples):
        scores = trajectory_mases(actual, traj, ins, m)
        means.append(float(scores.mean()))
        stds.append(float(scores.std()))
    return {
        "series_id": list(ids) if ids is not None else list(range(len(means))),
        "trajectory_mase_mean": means,
        "trajectory_mase_std": stds,
        "mean": float(np.mean(means)),
        "std": float(np.mean(stds)),
    }
