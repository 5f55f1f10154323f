"""Corpus-level forecasting and evaluation on hold-out windows."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .data import SeriesRecord, WindowBatch, forecast_window
from .errors import DataError, UndefinedMetricError
from .metrics import (EvalReport, build_subsamples, mae, mase, mse, snaive, summarize,
                      trajectory_mases)
from .model import ForecastResult, NhmmModel, forecast


def holdout_windows(records: Sequence[SeriesRecord], lookback: int, horizon: int) -> WindowBatch:
    """One window per series whose future is the final ``horizon`` observations."""
    return WindowBatch.concatenate(
        [forecast_window(r, lookback, horizon, origin=r.T - horizon) for r in records]
    )


def future_windows(records: Sequence[SeriesRecord], lookback: int, horizon: int) -> WindowBatch:
    """One window per series starting right after the last observation."""
    return WindowBatch.concatenate([forecast_window(r, lookback, horizon) for r in records])


def forecast_frame(batch: WindowBatch, result: ForecastResult) -> pd.DataFrame:
    """Long table: one row per (series, step) with mixture mean, marginals, per-state params
    and trajectory columns."""
    B, h, K = result.mu.shape
    n_traj = result.trajectories.shape[1]
    data = {
        "series_id": np.repeat(batch.series_ids.astype(str), h),
        "origin": np.repeat(batch.origins, h),
        "step": np.tile(np.arange(1, h + 1), B),
        "mixture_mean": result.mixture_mean.ravel(),
    }
    for k in range(K):
        data[f"p_{k + 1}"] = result.marginals[:, :, k].ravel()
    for k in range(K):
        data[f"mu_{k + 1}"] = result.mu[:, :, k].ravel()
    for k in range(K):
        data[f"sigma_{k + 1}"] = result.sigma[:, :, k].ravel()
    for j in range(n_traj):
        data[f"traj_{j + 1}"] = result.trajectories[:, j, :].ravel()
    return pd.DataFrame(data)


def forecast_records(model: NhmmModel, records: Sequence[SeriesRecord], n_traj: int = 0,
                     seed: int = 0, mode: str = "holdout") -> pd.DataFrame:
    if mode == "holdout":
        batch = holdout_windows(records, model.lookback, model.horizon)
    elif mode == "future":
        batch = future_windows(records, model.lookback, model.horizon)
    else:
        raise ValueError(f"unknown forecast mode {mode!r}")
    return forecast_frame(batch, forecast(model, batch, n_traj, seed))


def _standardized(actual, forecast_, insample):
    sd = insample.std()
    mu = insample.mean()
    sd = sd if sd > 0 else 1.0
    return (actual - mu) / sd, (forecast_ - mu) / sd


def evaluate_frame(frame: pd.DataFrame, records: Sequence[SeriesRecord],
                   metrics: Sequence[str] = ("mase", "mse", "mae"),
                   subsample_n: Optional[int] = None, standardize: bool = False) -> EvalReport:
    """Score a forecast table (see :func:`forecast_frame`) against the series it covers."""
    by_id = {r.id: r for r in records}
    gaps = sorted(set(by_id) - set(frame["series_id"].astype(str)))
    traj_cols = [c for c in frame.columns if c.startswith("traj_")]
    problems, rows = [], []
    for sid, part in frame.groupby(frame["series_id"].astype(str), sort=True):
        if sid not in by_id:
            problems.append(f"{sid}: not in dataset")
            continue
        rec = by_id[sid]
        part = part.sort_values("step")
        origin = int(part["origin"].iloc[0])
        h = len(part)
        if list(part["step"]) != list(range(1, h + 1)):
            problems.append(f"{sid}: steps are not 1..{h}")
            continue
        if origin + h > rec.T:
            problems.append(f"{sid}: forecast extends {origin + h - rec.T} steps past the data")
            continue
        actual = rec.y[origin:origin + h]
        insample = rec.y[:origin]
        pred = part["mixture_mean"].to_numpy()
        row = {"series_id": sid, "origin": origin, "horizon": h}
        a_std, p_std = _standardized(actual, pred, insample) if standardize else (actual, pred)
        if "mse" in metrics:
            row["mse"] = mse(a_std, p_std)
        if "mae" in metrics:
            row["mae"] = mae(a_std, p_std)
        if "mase" in metrics:
            for name, f in (("mase", pred), ("snaive_mase", snaive(insample, rec.m, h))):
                try:
                    row[name] = mase(actual, f, insample, rec.m)
                except UndefinedMetricError:
                    row[name] = np.nan
            if traj_cols:
                try:
                    scores = trajectory_mases(actual, part[traj_cols].to_numpy().T, insample, rec.m)
                    row["traj_mase_mean"] = float(scores.mean())
                    row["traj_mase_std"] = float(scores.std())
                except UndefinedMetricError:
                    row["traj_mase_mean"] = row["traj_mase_std"] = np.nan
        rows.append(row)
    if gaps or problems:
        listed = [f"{g}: no forecast" for g in gaps] + problems
        raise DataError("forecast coverage gaps:\n  " + "\n  ".join(listed))
    per_series = pd.DataFrame(rows)
    subsamples = None
    if subsample_n and "snaive_mase" in per_series:
        subsamples = build_subsamples(per_series["series_id"], per_series["snaive_mase"], subsample_n)
    cols = [c for c in per_series.columns if c not in ("series_id", "origin", "horizon")]
    summary = summarize(per_series, cols, subsamples)
    summary["standardized"] = bool(standardize)
    return EvalReport(per_series=per_series, summary=summary, subsamples=subsamples)


def probabilistic_score(model: NhmmModel, records: Sequence[SeriesRecord], n_traj: int = 100,
                        seed: int = 0) -> dict:
    """Mean and std of per-trajectory MASE on each series' hold-out window."""
    frame = forecast_records(model, records, n_traj=n_traj, seed=seed)
    report = evaluate_frame(frame, records, metrics=("mase",))
    ps = report.per_series
    return {
        "per_series": ps[["series_id", "traj_mase_mean", "traj_mase_std"]],
        "mean": float(ps["traj_mase_mean"].mean()),
        "std": float(ps["traj_mase_std"].mean()),
    }
