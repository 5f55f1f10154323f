"""Command line: train, forecast, evaluate, simulate, gridsearch.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from . import checkpoint
from .data import (Manifest, SeriesRecord, SplitPolicy, SyntheticSpec, generate_synthetic,
                   load_dataset, make_windows, save_long_csv)
from .errors import ConfigError, DataError, NhmmError
from .evaluation import evaluate_frame, forecast_records, holdout_windows
from .model import NhmmModel
from .training import TrainConfig, grid_search, train, window_scores

log = logging.getLogger("nhmm")

TASKS = ("seasonal", "reference", "synthetic")
MODEL_KEYS = ("n_states", "horizon", "lookback", "hidden", "activation", "scaler", "signal_states",
              "prior_uses_signal", "posterior_uses_signal", "signal_scaling")


@dataclass
class RunConfig:
    """Structured run description, loaded from JSON.

    ``data`` holds either ``{"manifest": path}`` or ``{"synthetic": {...}, "seed": int}``.
    """

    task: str = "seasonal"
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: dict = field(default_factory=dict)
    stride: int = 1
    grid: dict = field(default_factory=dict)
    out: str = "runs/default"
    base_dir: str = "."

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw, base_dir=str(path.parent))

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str = ".") -> "RunConfig":
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        raw = dict(raw)
        raw["train"] = TrainConfig.from_dict(raw.get("train", {}))
        cfg = cls(**raw, base_dir=base_dir)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task: expected one of {TASKS}, got {self.task!r}")
        bad = set(self.model) - set(MODEL_KEYS)
        if bad:
            raise ConfigError(f"unknown model fields {sorted('model.' + b for b in bad)}")
        if int(self.model.get("horizon", 1)) < 1:
            raise ConfigError("model.horizon must be >= 1")
        if "manifest" not in self.data and "synthetic" not in self.data:
            raise ConfigError("data: provide data.manifest or data.synthetic")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")

    def resolve(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def metric(self) -> str:
        return self.grid.get("metric") or ("mse" if self.task == "reference" else "mase")

    def split_policy(self, horizon: int) -> SplitPolicy:
        kw = dict(self.split)
        if self.task != "reference" and "test_size" not in kw and "test_fraction" not in kw:
            kw["test_size"] = horizon
        try:
            return SplitPolicy(**kw)
        except TypeError as exc:
            raise ConfigError(f"split: {exc}") from None

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("base_dir")
        return out


def load_records(cfg: RunConfig) -> list[SeriesRecord]:
    if "manifest" in cfg.data:
        path = cfg.resolve(cfg.data["manifest"])
        if not path.exists():
            raise ConfigError(f"data.manifest: file not found: {path}")
        return load_dataset(Manifest.load(path))
    spec = SyntheticSpec.from_dict(cfg.data["synthetic"])
    records, _ = generate_synthetic(spec, seed=int(cfg.data.get("seed", 0)))
    return records


def data_checksum(records) -> str:
    digest = hashlib.sha256()
    for r in records:
        digest.update(r.id.encode())
        digest.update(np.ascontiguousarray(r.y).tobytes())
        if r.w is not None:
            digest.update(np.ascontiguousarray(r.w).tobytes())
    return digest.hexdigest()


def _model_kwargs(cfg: RunConfig, m: int) -> dict:
    kw = {k: v for k, v in cfg.model.items() if k not in ("horizon", "lookback")}
    kw.setdefault("n_states", 2)
    return kw


def _dims(cfg: RunConfig, records) -> tuple[int, int]:
    m = records[0].m
    horizon = int(cfg.model.get("horizon", m))
    lookback = int(cfg.model.get("lookback", m))
    return horizon, lookback


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj)}")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("NHMM_THREADS", "1")))
    except ValueError:
        raise ConfigError("NHMM_THREADS must be an integer") from None


# commands


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = Path(args.out or cfg.resolve(cfg.out))
    records = load_records(cfg)
    horizon, lookback = _dims(cfg, records)
    split = cfg.split_policy(horizon)
    windows = make_windows(records, lookback, horizon, cfg.stride, split)
    model = NhmmModel(horizon=horizon, lookback=lookback, n_signals=records[0].n_signals,
                      seed=cfg.train.seed, **_model_kwargs(cfg, records[0].m))
    report = train(model, windows["train"], windows["validation"], cfg.train)

    by_id = {r.id: r for r in records}
    report.final_metrics = {
        f"validation_{cfg.metric}": float(np.nanmean(window_scores(model, windows["validation"], by_id, cfg.metric))),
        f"test_{cfg.metric}": float(np.nanmean(window_scores(model, windows["test"], by_id, cfg.metric))),
    }
    stamp = {"config": cfg.to_dict(), "seed": cfg.train.seed, "data_checksum": data_checksum(records)}
    checkpoint.save(model, out / "checkpoint.json",
                    training={"seed": cfg.train.seed, "stage_epochs": report.stage_epochs},
                    extra={"seasonality": records[0].m, "task": cfg.task})
    _write_json(out / "report.json", {**report.metrics_dict(), "stamp": stamp})
    _write_json(out / "timing.json", {"wall_clock_seconds": report.wall_clock})
    pd.DataFrame(report.history).to_csv(out / "history.csv", index=False)
    print(json.dumps({"out": str(out), **report.final_metrics}))
    return 0


def cmd_forecast(args) -> int:
    model, meta = checkpoint.load(args.checkpoint)
    records = load_dataset(Manifest.load(args.data))
    if records[0].n_signals != model.n_signals:
        raise DataError(f"checkpoint expects {model.n_signals} signal channels, "
                        f"data has {records[0].n_signals}")
    short = [r.id for r in records if r.T < model.lookback + (model.horizon if args.mode == "holdout" else 0)]
    if short:
        raise DataError(f"lookback W={model.lookback} does not fit series {short}")
    frame = forecast_records(model, records, n_traj=args.n_traj, seed=args.seed, mode=args.mode)
    out = Path(args.out or "forecast.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format="%.17g")
    print(json.dumps({"out": str(out), "rows": len(frame), "seed": args.seed}))
    return 0


def cmd_evaluate(args) -> int:
    frame = pd.read_csv(args.forecast, dtype={"series_id": str})
    manifest = Manifest.load(args.data)
    records = load_dataset(manifest)
    metrics = [m.strip() for m in args.metric.split(",") if m.strip()]
    bad = set(metrics) - {"mase", "mse", "mae"}
    if bad:
        raise ConfigError(f"--metric: unknown metrics {sorted(bad)}")
    standardize = args.standardize if args.standardize is not None else manifest.task == "reference"
    report = evaluate_frame(frame, records, metrics, args.subsample_n, standardize)
    out = Path(args.out or "evaluation")
    out.mkdir(parents=True, exist_ok=True)
    report.per_series.to_csv(out / "per_series.csv", index=False, float_format="%.17g")
    if args.format == "json":
        _write_json(out / "summary.json", report.to_dict())
    else:
        pd.DataFrame([report.summary]).to_csv(out / "summary.csv", index=False)
    print(json.dumps(report.summary, default=_json_default))
    return 0


def cmd_simulate(args) -> int:
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"spec not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    spec = SyntheticSpec.from_dict(raw)
    seed = args.seed if args.seed is not None else 0
    records, paths = generate_synthetic(spec, seed)
    out = Path(args.out or "synthetic")
    out.mkdir(parents=True, exist_ok=True)
    save_long_csv(records, out / "data.csv")
    pd.concat(
        [pd.DataFrame({"series_id": r.id, "t": np.arange(r.T), "regime": p}) for r, p in zip(records, paths)]
    ).to_csv(out / "regimes.csv", index=False)
    manifest = {
        "path": "data.csv", "format": "long", "id_column": "series_id", "time_column": "t",
        "value_column": "y", "signal_columns": [f"w{j + 1}" for j in range(records[0].n_signals)],
        "seasonality": spec.seasonality, "frequency": "synthetic", "task": "synthetic",
    }
    _write_json(out / "manifest.json", manifest)
    print(json.dumps({"out": str(out), "series": len(records), "seed": seed}))
    return 0


def cmd_gridsearch(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = Path(args.out or cfg.resolve(cfg.out))
    records = load_records(cfg)
    horizon, lookback = _dims(cfg, records)
    axes = cfg.grid.get("axes", {})
    if not axes:
        raise ConfigError("grid.axes must name at least one axis")
    kw = _model_kwargs(cfg, records[0].m)
    kw["lookback"] = lookback
    result = grid_search(records, axes, kw, cfg.train, horizon, cfg.split_policy(horizon),
                         metric=cfg.metric, budget=cfg.grid.get("budget"),
                         seeds=cfg.grid.get("seeds", [cfg.train.seed]), stride=cfg.stride,
                         n_jobs=_threads())
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(result.table()).to_csv(out / "ranking.csv", index=False)
    if result.best_model is not None:
        checkpoint.save(result.best_model, out / "best_checkpoint.json",
                        training={"seed": result.best_report.seed,
                                  "stage_epochs": result.best_report.stage_epochs},
                        extra={"seasonality": records[0].m, "task": cfg.task,
                               "grid_cell": result.best.params})
    print(json.dumps({"out": str(out), "best": None if result.best is None else result.best.params}))
    return 0 if result.best is not None else 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nhmm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="two-stage training from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="forecast every series of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--n-traj", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("holdout", "future"), default="holdout")
    p.add_argument("--out")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", help="score a forecast CSV")
    p.add_argument("--forecast", required=True)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--metric", default="mase,mse,mae")
    p.add_argument("--subsample-n", type=int)
    p.add_argument("--standardize", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="generate a synthetic regime-switching corpus")
    p.add_argument("--config", required=True, help="synthetic spec JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gridsearch", help="grid search over training and model axes")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gridsearch)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except NhmmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
