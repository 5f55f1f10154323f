"""Series ingestion, per-window scaling, sliding windows and a synthetic regime generator."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ConfigError, DataError

ScalerKind = Literal["minmax", "standard"]


@dataclass
class SeriesRecord:
    id: str
    y: np.ndarray
    w: Optional[np.ndarray] = None  # (T, E)
    m: int = 1
    frequency: str = ""

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim != 1:
            raise DataError(f"series {self.id!r}: y must be one-dimensional")
        if not np.all(np.isfinite(self.y)):
            raise DataError(f"series {self.id!r}: missing or non-finite values in y")
        if self.w is not None:
            w = np.asarray(self.w, dtype=np.float64)
            if w.ndim == 1:
                w = w[:, None]
            if w.shape[0] != self.y.shape[0]:
                raise DataError(
                    f"series {self.id!r}: external signal length {w.shape[0]} != {self.y.shape[0]}"
                )
            if not np.all(np.isfinite(w)):
                raise DataError(f"series {self.id!r}: missing or non-finite values in w")
            self.w = w
        if self.m < 1:
            raise DataError(f"series {self.id!r}: seasonality must be positive")
        if len(self.y) <= self.m:
            raise DataError(f"series {self.id!r}: length {len(self.y)} must exceed m={self.m}")

    @property
    def T(self) -> int:
        return len(self.y)

    @property
    def n_signals(self) -> int:
        return 0 if self.w is None else self.w.shape[1]


# scaling


@dataclass
class ScalerParams:
    """Per-row affine statistics; ``scale == 0`` marks a degenerate window."""

    kind: str
    loc: np.ndarray
    scale: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        loc, scale = self.loc[..., None], self.scale[..., None]
        safe = np.where(scale > 0, scale, 1.0)
        return np.where(scale > 0, (x - loc) / safe, 0.0)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        """Map scaled values back; extra trailing axes beyond the fitted rows broadcast."""
        z = np.asarray(z, dtype=np.float64)
        extra = z.ndim - self.loc.ndim
        loc = self.loc.reshape(self.loc.shape + (1,) * extra)
        scale = self.scale.reshape(self.scale.shape + (1,) * extra)
        return np.where(scale > 0, z * scale + loc, loc + 0.0 * z)

    def subset(self, index) -> "ScalerParams":
        return ScalerParams(self.kind, self.loc[index], self.scale[index])


def fit_scaler(x, kind: ScalerKind = "minmax") -> ScalerParams:
    """Fit statistics along the last axis of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise DataError("cannot fit a scaler on an empty window")
    if kind == "minmax":
        lo, hi = x.min(axis=-1), x.max(axis=-1)
        loc, scale = lo, hi - lo
    elif kind == "standard":
        loc, scale = x.mean(axis=-1), x.std(axis=-1)
    else:
        raise ConfigError(f"unknown scaler kind {kind!r}")
    return ScalerParams(kind, np.asarray(loc), np.asarray(scale))


def apply_scaler(params: ScalerParams, x) -> np.ndarray:
    return params.transform(x)


def invert_scaler(params: ScalerParams, z) -> np.ndarray:
    return params.inverse(z)


class RowScaler(TransformerMixin, BaseEstimator):
    """Scale each row by statistics of that row.

    ``fit`` learns one (loc, scale) pair per row; ``transform`` and
    ``inverse_transform`` then accept any array whose leading dimension
    matches, e.g. the future targets aligned with the fitted past windows.
    """

    def __init__(self, kind: ScalerKind = "minmax"):
        self.kind = kind

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.params_ = fit_scaler(X, self.kind)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        self._check_rows(X)
        return self.params_.transform(X)

    def inverse_transform(self, X):
        check_is_fitted(self, "params_")
        X = np.asarray(X, dtype=np.float64)
        self._check_rows(X)
        return self.params_.inverse(X)

    def _check_rows(self, X):
        if X.shape[0] != self.params_.loc.shape[0]:
            raise DataError(
                f"RowScaler fitted on {self.params_.loc.shape[0]} rows, got {X.shape[0]}"
            )


# CSV ingestion


@dataclass
class Manifest:
    path: str
    format: Literal["wide", "long"] = "long"
    id_column: str = "series_id"
    time_column: Optional[str] = "t"
    value_column: str = "y"
    signal_columns: list[str] = field(default_factory=list)
    signal_path: Optional[str] = None  # wide format only: one signal column per series
    seasonality: int = 1
    frequency: str = ""
    task: str = "seasonal"
    require_equal_length: bool = True

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"manifest not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"{path}: unknown manifest fields {sorted(unknown)}")
        if "path" not in raw:
            raise ConfigError(f"{path}: manifest.path is required")
        manifest = cls(**raw)
        base = path.parent
        manifest.path = str((base / manifest.path).resolve())
        if manifest.signal_path:
            manifest.signal_path = str((base / manifest.signal_path).resolve())
        return manifest

    def schema(self) -> dict:
        return {
            "id_column": self.id_column,
            "time_column": self.time_column,
            "value_column": self.value_column,
            "signal_columns": list(self.signal_columns),
            "signal_path": self.signal_path,
            "seasonality": self.seasonality,
            "frequency": self.frequency,
            "require_equal_length": self.require_equal_length,
        }


def _numeric(frame: pd.DataFrame, columns: Sequence[str], path) -> pd.DataFrame:
    out = {}
    for col in columns:
        raw = frame[col]
        missing = raw.isna() | (raw.astype(str).str.strip() == "")
        if missing.any():
            row = int(np.flatnonzero(missing.to_numpy())[0])
            raise DataError(f"{path}: missing value at row {row + 2}, column {col!r}")
        values = pd.to_numeric(raw, errors="coerce")
        if values.isna().any():
            row = int(np.flatnonzero(values.isna().to_numpy())[0])
            raise DataError(
                f"{path}: unparseable number {raw.iloc[row]!r} at row {row + 2}, column {col!r}"
            )
        # to_numeric is not correctly rounded; float() is
        out[col] = np.array([float(v) for v in raw], dtype=np.float64)
    return pd.DataFrame(out, index=frame.index)


def _time_key(times: pd.Series) -> Optional[np.ndarray]:
    numeric = pd.to_numeric(times, errors="coerce")
    if numeric.notna().all():
        return numeric.to_numpy(dtype=np.float64)
    parsed = pd.to_datetime(times, errors="coerce")
    if parsed.isna().any():
        return None
    return parsed.to_numpy().astype("datetime64[ns]").astype(np.int64).astype(np.float64)


def _check_regular(times: pd.Series, label: str, path) -> None:
    key = _time_key(times)
    if key is None:
        raise DataError(f"{path}: unparseable timestamps for {label}")
    if len(key) < 2:
        return
    steps = np.diff(key)
    if np.any(steps <= 0) or np.any(steps != steps[0]):
        raise DataError(f"{path}: irregular or duplicated timestamps for {label}")


def load_csv(path, format: str = "long", schema: Optional[dict] = None) -> list[SeriesRecord]:
    """Read series from a UTF-8 CSV with a header row.

    ``long``: one row per (id, time) with a value column and optional signal
    columns.  ``wide``: one column per series, optional time column; signals
    come from a second wide file (``signal_path``) with matching columns.
    """
    schema = dict(schema or {})
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    m = int(schema.get("seasonality", 1))
    freq = str(schema.get("frequency", ""))
    time_col = schema.get("time_column")

    if format == "wide":
        columns = [c for c in frame.columns if c != time_col]
        if time_col and time_col in frame:
            _check_regular(frame[time_col], "wide file", path)
        values = _numeric(frame, columns, path)
        signals = None
        if schema.get("signal_path"):
            sframe = pd.read_csv(schema["signal_path"], dtype=str, keep_default_na=False)
            missing = [c for c in columns if c not in sframe.columns]
            if missing:
                raise DataError(f"{schema['signal_path']}: no signal columns for {missing}")
            if len(sframe) != len(frame):
                raise DataError(f"{schema['signal_path']}: row count differs from {path}")
            signals = _numeric(sframe, columns, schema["signal_path"])
        records = [
            SeriesRecord(
                id=str(c),
                y=values[c].to_numpy(),
                w=None if signals is None else signals[c].to_numpy()[:, None],
                m=m,
                frequency=freq,
            )
            for c in columns
        ]
    elif format == "long":
        id_col = schema.get("id_column", "series_id")
        value_col = schema.get("value_column", "y")
        signal_cols = list(schema.get("signal_columns") or [])
        needed = [id_col, value_col, *signal_cols] + ([time_col] if time_col else [])
        absent = [c for c in needed if c not in frame.columns]
        if absent:
            raise DataError(f"{path}: missing columns {absent}")
        numbers = _numeric(frame, [value_col, *signal_cols], path)
        records = []
        lengths = {}
        for sid, idx in frame.groupby(id_col, sort=False).groups.items():
            rows = frame.loc[idx]
            if time_col:
                key = _time_key(rows[time_col])
                if key is None:
                    raise DataError(f"{path}: unparseable timestamps for series {sid!r}")
                rows = rows.iloc[np.argsort(key, kind="stable")]
                _check_regular(rows[time_col], f"series {sid!r}", path)
            sub = numbers.loc[rows.index]
            lengths[str(sid)] = len(rows)
            records.append(
                SeriesRecord(
                    id=str(sid),
                    y=sub[value_col].to_numpy(),
                    w=sub[signal_cols].to_numpy() if signal_cols else None,
                    m=m,
                    frequency=freq,
                )
            )
        if schema.get("require_equal_length", True) and len(set(lengths.values())) > 1:
            raise DataError(f"{path}: ragged series lengths {lengths}")
    else:
        raise ConfigError(f"unknown CSV format {format!r}")
    return sorted(records, key=lambda r: r.id)


def load_dataset(manifest: Manifest) -> list[SeriesRecord]:
    return load_csv(manifest.path, manifest.format, manifest.schema())


def save_long_csv(records: Sequence[SeriesRecord], path) -> None:
    frames = []
    for r in records:
        data = {"series_id": r.id, "t": np.arange(r.T), "y": r.y}
        for j in range(r.n_signals):
            data[f"w{j + 1}"] = r.w[:, j]
        frames.append(pd.DataFrame(data))
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.17g")


# windows


@dataclass
class WindowBatch:
    """Aligned windows; ``future_y`` starts one step after ``past_y`` ends."""

    past_y: np.ndarray  # (B, W)
    future_y: np.ndarray  # (B, h)
    past_w: Optional[np.ndarray] = None  # (B, W, E)
    series_ids: np.ndarray = field(default_factory=lambda: np.array([], dtype=object))
    origins: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))

    def __len__(self) -> int:
        return self.past_y.shape[0]

    def subset(self, index) -> "WindowBatch":
        return WindowBatch(
            past_y=self.past_y[index],
            future_y=self.future_y[index],
            past_w=None if self.past_w is None else self.past_w[index],
            series_ids=self.series_ids[index],
            origins=self.origins[index],
        )

    @classmethod
    def concatenate(cls, batches: Sequence["WindowBatch"]) -> "WindowBatch":
        return cls(
            past_y=np.concatenate([b.past_y for b in batches]),
            future_y=np.concatenate([b.future_y for b in batches]),
            past_w=None if batches[0].past_w is None else np.concatenate([b.past_w for b in batches]),
            series_ids=np.concatenate([b.series_ids for b in batches]),
            origins=np.concatenate([b.origins for b in batches]),
        )


@dataclass
class SplitPolicy:
    """Test region is the last ``test_size`` steps if set, else the last ``test_fraction``."""

    test_fraction: float = 0.2
    test_size: Optional[int] = None
    val_fraction: float = 0.1

    def test_start(self, T: int) -> int:
        if self.test_size is not None:
            return T - int(self.test_size)
        return T - int(round(self.test_fraction * T))


def _origins(lo: int, hi: int, stride: int) -> list[int]:
    # latest origin always included
    return sorted(range(hi, lo - 1, -stride)) if hi >= lo else []


def window_at(record: SeriesRecord, origin: int, W: int, h: int) -> WindowBatch:
    return _collect(record, [origin], W, h)


def _collect(record: SeriesRecord, origins: Sequence[int], W: int, h: int,
             future: bool = True) -> WindowBatch:
    n = len(origins)
    E = record.n_signals
    past_y = np.empty((n, W))
    future_y = np.empty((n, h))
    past_w = np.empty((n, W, E)) if E else None
    for i, t in enumerate(origins):
        past_y[i] = record.y[t - W:t]
        if future:
            future_y[i] = record.y[t:t + h]
        if E:
            past_w[i] = record.w[t - W:t]
    if not future:
        future_y[:] = np.nan
    return WindowBatch(past_y, future_y, past_w,
                       np.array([record.id] * n, dtype=object), np.asarray(origins, dtype=np.int64))


def forecast_window(record: SeriesRecord, W: int, h: int, origin: Optional[int] = None) -> WindowBatch:
    """Window for forecasting from ``origin`` (default: the end of the data, future unknown)."""
    t = record.T if origin is None else origin
    if t < W:
        raise DataError(f"series {record.id!r}: origin {t} leaves fewer than W={W} past values")
    return _collect(record, [t], W, h, future=t + h <= record.T)


def make_windows(records: Sequence[SeriesRecord], W: int, h: int, stride: int = 1,
                 split: Optional[SplitPolicy] = None) -> dict[str, WindowBatch]:
    """Build train / validation / test windows without leaking the test region."""
    split = split or SplitPolicy()
    if stride < 1 or W < 1 or h < 1:
        raise ConfigError("W, h and stride must be >= 1")
    too_short = [r.id for r in records if W + h > r.T]
    if too_short:
        raise DataError(f"W + h = {W + h} exceeds series length for {too_short}")
    if not records:
        raise DataError("no series supplied")
    n_signals = {r.n_signals for r in records}
    if len(n_signals) > 1:
        raise DataError("series disagree on the number of external-signal channels")

    parts = {"train": [], "validation": [], "test": []}
    for r in records:
        T = r.T
        test_start = split.test_start(T)
        test_origins = _origins(max(test_start, W), T - h, stride)
        if not test_origins:
            test_origins = [T - h]
        val_start = test_start - int(round(split.val_fraction * test_start))
        val_origins = _origins(max(W, val_start - h + 1), test_start - h, stride)
        train_origins = _origins(W, val_start - h, stride)
        parts["test"].append(_collect(r, test_origins, W, h))
        parts["validation"].append(_collect(r, val_origins, W, h))
        parts["train"].append(_collect(r, train_origins, W, h))
    return {name: WindowBatch.concatenate(batches) for name, batches in parts.items()}


# synthetic regime-switching corpus


@dataclass
class RegimeParams:
    amplitude: float = 1.0
    slope: float = 0.0  # drift per seasonal period while the regime is active
    noise: float = 0.1
    level: float = 0.0


def default_regimes(K: int) -> list[RegimeParams]:
    if K == 1:
        return [RegimeParams()]
    return [
        RegimeParams(amplitude=1.0, slope=0.0, noise=0.1 + 0.3 * k / (K - 1), level=2.5 * k)
        for k in range(K)
    ]


@dataclass
class SyntheticSpec:
    n_series: int = 500
    length: int = 209
    seasonality: int = 52
    n_regimes: int = 2
    stickiness: float = 0.98
    signal_lead: Optional[int] = 8
    signal_noise: float = 0.1
    regimes: Optional[list[RegimeParams]] = None

    def __post_init__(self):
        if not 0.0 < self.stickiness <= 1.0:
            raise ConfigError("stickiness must lie in (0, 1]")
        if self.n_regimes < 1 or self.n_series < 1:
            raise ConfigError("n_regimes and n_series must be >= 1")
        if self.length <= self.seasonality:
            raise ConfigError("length must exceed seasonality")
        if self.regimes is None:
            self.regimes = default_regimes(self.n_regimes)
        self.regimes = [r if isinstance(r, RegimeParams) else RegimeParams(**r) for r in self.regimes]
        if len(self.regimes) != self.n_regimes:
            raise ConfigError("one RegimeParams entry per regime is required")

    def transition_matrix(self) -> np.ndarray:
        K = self.n_regimes
        if K == 1:
            return np.ones((1, 1))
        P = np.full((K, K), (1.0 - self.stickiness) / (K - 1))
        np.fill_diagonal(P, self.stickiness)
        return P

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic spec fields {sorted(unknown)}")
        return cls(**raw)


def generate_synthetic(spec: SyntheticSpec, seed: int = 0):
    """Return ``(records, paths)`` where ``paths[i]`` is the true regime of every step.

    The external signal, when ``signal_lead`` is set, is the regime index
    (scaled to [0, 1]) read ``signal_lead`` steps ahead, plus Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    K, T, m = spec.n_regimes, spec.length, spec.seasonality
    lead = spec.signal_lead or 0
    P = spec.transition_matrix()
    cum = np.cumsum(P, axis=1)
    amp = np.array([r.amplitude for r in spec.regimes])
    slope = np.array([r.slope for r in spec.regimes])
    noise = np.array([r.noise for r in spec.regimes])
    level = np.array([r.level for r in spec.regimes])

    records, paths = [], []
    for i in range(spec.n_series):
        n = T + lead
        x = np.empty(n, dtype=np.int64)
        x[0] = rng.integers(K)
        u = rng.random(n)
        for t in range(1, n):
            x[t] = min(int(np.searchsorted(cum[x[t - 1]], u[t], side="right")), K - 1)
        path = x[:T]
        phase = rng.uniform(0, m)
        scale = float(np.exp(rng.normal(0.0, 0.5)))
        t = np.arange(T)
        drift = np.cumsum(slope[path] / m)
        y = level[path] + amp[path] * np.sin(2 * np.pi * (t + phase) / m) + drift
        y = scale * (y + noise[path] * rng.standard_normal(T))
        w = None
        if spec.signal_lead is not None:
            ahead = x[lead:lead + T] / max(K - 1, 1)
            w = (ahead + spec.signal_noise * rng.standard_normal(T))[:, None]
        records.append(SeriesRecord(id=f"syn_{i:05d}", y=y, w=w, m=m, frequency="synthetic"))
        paths.append(path)
    return records, paths
