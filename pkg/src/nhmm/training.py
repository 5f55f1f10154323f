"""Two-stage ELBO optimisation, grid search and seeded replicates.

Stage 1 fits the emission and posterior networks under a fixed uniform
hidden law.  Stage 2 freezes them and fits the prior network to the
posterior's state probabilities.
"""
from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import diffmath as dm
from .data import SeriesRecord, SplitPolicy, WindowBatch, make_windows
from .errors import ConfigError, DivergenceError, NhmmError
from .metrics import mase, mse
from .model import NhmmModel, ScaledBatch, elbo_graph, forecast
from .networks import clamp_log

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 2048
    max_epochs: int = 300
    patience: int = 10
    stage2_max_epochs: Optional[int] = None  # defaults to max_epochs
    stage2_patience: Optional[int] = None  # defaults to patience
    clip_norm: Optional[float] = 10.0
    weight_decay: float = 0.0
    min_delta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.patience < 1 or (self.stage2_patience is not None and self.stage2_patience < 1):
            raise ConfigError("train.patience must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("train.max_epochs must be >= 0")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train fields {sorted('train.' + u for u in unknown)}")
        return cls(**raw)


class Adam:
    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 clip_norm=None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        if not math.isfinite(norm):
            raise DivergenceError("non-finite gradient")
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


@dataclass
class EarlyStopping:
    """Tracks the best (lowest) validation loss seen so far."""

    patience: int
    min_delta: float = 0.0
    best: float = math.inf
    best_epoch: int = -1
    bad_epochs: int = 0
    history: list = field(default_factory=list)

    def update(self, value: float, epoch: int) -> bool:
        """Record ``value``; returns True when it is a new best."""
        improved = value < self.best - self.min_delta
        if improved:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        self.history.append(self.best)
        return improved

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class TrainReport:
    history: list = field(default_factory=list)
    stage_epochs: dict = field(default_factory=dict)
    best_epoch: dict = field(default_factory=dict)
    best_validation: dict = field(default_factory=dict)
    hashes: dict = field(default_factory=dict)
    final_metrics: dict = field(default_factory=dict)
    seed: int = 0
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def metrics_dict(self) -> dict:
        """Everything except wall-clock timing; identical across deterministic reruns."""
        out = self.to_dict()
        out.pop("wall_clock")
        return out


def _hashes(model: NhmmModel) -> dict:
    return {g: model.group_hash(g) for g in model.parameter_groups()}


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _as_scaled(model: NhmmModel, batch) -> ScaledBatch:
    return batch if isinstance(batch, ScaledBatch) else model.prepare(batch)


def _stage1_loss(model, scaled) -> dm.Tensor:
    rows = elbo_graph(model, scaled, uniform_prior=True)
    return -dm.mean(rows["total"]), rows


def _stage1_validation(model, scaled) -> dict:
    with dm.no_grad():
        rows = elbo_graph(model, scaled, uniform_prior=True)
    return {k: float(np.mean(v.data)) for k, v in rows.items()}


def _posterior_table(model, scaled) -> np.ndarray:
    with dm.no_grad():
        return model.posterior_probs(scaled.past_y, scaled.past_w, scaled.future_y).data


def transition_rows(pi, alpha, beta) -> dm.Tensor:
    """Per-row expected log hidden-law probability under the step-factorized posterior."""
    beta = dm.as_tensor(beta)
    B, h, K = beta.shape
    out = dm.sum_(beta[:, 0, :] * clamp_log(pi), axis=1)
    if h > 1:
        pair = dm.reshape(beta[:, :-1, :], (B, h - 1, K, 1)) * dm.reshape(beta[:, 1:, :], (B, h - 1, 1, K))
        out = out + dm.sum_(pair * clamp_log(alpha), axis=(1, 2, 3))
    return out


def _stage2_value(model, scaled, beta) -> float:
    with dm.no_grad():
        pi, alpha = model.hidden_law(scaled.past_y, scaled.past_w)
        return float(np.mean(transition_rows(pi, alpha, beta).data))


def _run_stage(name, model, params, train, n_train, val_loss_fn, step_fn, config, max_epochs,
               patience, report, rng):
    """Generic epoch loop with early stopping; restores the best parameters on exit."""
    opt = Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay,
               clip_norm=config.clip_norm)
    stopper = EarlyStopping(patience, config.min_delta)
    val_loss, extra = val_loss_fn()
    stopper.update(val_loss, 0)
    best_state = [p.data.copy() for p in params]
    report.history.append({"stage": name, "epoch": 0, "train_loss": None, "val_loss": val_loss,
                           **extra, "best_val_loss": stopper.best})
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        losses = []
        try:
            for idx in _batches(n_train, config.batch_size, rng):
                loss = step_fn(idx)
                opt_grads = dm.grad(loss, params)
                if not math.isfinite(loss.item()):
                    raise DivergenceError(f"{name}: non-finite training loss")
                opt.step(opt_grads)
                losses.append(loss.item() * len(idx))
            val_loss, extra = val_loss_fn()
            if not math.isfinite(val_loss):
                raise DivergenceError(f"{name}: non-finite validation loss")
        except DivergenceError as exc:
            for p, saved in zip(params, best_state):
                p.data = saved
            report.stage_epochs[name] = epoch - 1
            exc.report = report
            raise
        if stopper.update(val_loss, epoch):
            best_state = [p.data.copy() for p in params]
        report.history.append({"stage": name, "epoch": epoch, "train_loss": sum(losses) / n_train,
                               "val_loss": val_loss, **extra, "best_val_loss": stopper.best})
        log.debug("%s epoch %d train %.5f val %.5f", name, epoch, sum(losses) / n_train, val_loss)
        if stopper.should_stop:
            break
    for p, saved in zip(params, best_state):
        p.data = saved
    report.stage_epochs[name] = epoch
    report.best_epoch[name] = stopper.best_epoch
    report.best_validation[name] = stopper.best
    return report


def train_stage1(model: NhmmModel, train, validation, config: TrainConfig,
                 report: Optional[TrainReport] = None) -> TrainReport:
    """Fit emissions and posterior on the ELBO with a uniform hidden law."""
    report = report or TrainReport(seed=config.seed)
    train, validation = _as_scaled(model, train), _as_scaled(model, validation)
    groups = model.parameter_groups()
    params = groups["emission"] + groups["posterior"]
    rng = np.random.default_rng([config.seed, 1])

    def step(idx):
        loss, _ = _stage1_loss(model, train.subset(idx))
        return loss

    def val():
        terms = _stage1_validation(model, validation)
        return -terms["total"], {f"val_{k}": v for k, v in terms.items()}

    return _run_stage("stage1", model, params, train, len(train), val, step, config,
                      config.max_epochs, config.patience, report, rng)


def train_stage2(model: NhmmModel, train, validation, config: TrainConfig,
                 report: Optional[TrainReport] = None) -> TrainReport:
    """Fit the prior network alone against the frozen posterior."""
    report = report or TrainReport(seed=config.seed)
    train, validation = _as_scaled(model, train), _as_scaled(model, validation)
    beta_train = _posterior_table(model, train)
    beta_val = _posterior_table(model, validation)
    params = model.parameter_groups()["prior"]
    rng = np.random.default_rng([config.seed, 2])

    def step(idx):
        sub = train.subset(idx)
        pi, alpha = model.hidden_law(sub.past_y, sub.past_w)
        return -dm.mean(transition_rows(pi, alpha, beta_train[idx]))

    def val():
        value = _stage2_value(model, validation, beta_val)
        return -value, {"val_transition": value}

    max_epochs = config.stage2_max_epochs if config.stage2_max_epochs is not None else config.max_epochs
    patience = config.stage2_patience or config.patience
    return _run_stage("stage2", model, params, train, len(train), val, step, config,
                      max_epochs, patience, report, rng)


def train(model: NhmmModel, train_batch, validation_batch, config: TrainConfig) -> TrainReport:
    """Stage 1 then stage 2; records parameter hashes around stage 2."""
    started = time.perf_counter()
    report = TrainReport(seed=config.seed)
    model.fit_signal_scaler(train_batch)
    train_s = _as_scaled(model, train_batch)
    val_s = _as_scaled(model, validation_batch)
    train_stage1(model, train_s, val_s, config, report)
    report.hashes["after_stage1"] = _hashes(model)
    train_stage2(model, train_s, val_s, config, report)
    report.hashes["after_stage2"] = _hashes(model)
    report.wall_clock = time.perf_counter() - started
    return report


# evaluation on windows


def window_scores(model: NhmmModel, batch: WindowBatch, records: dict[str, SeriesRecord],
                  metric: str = "mase") -> np.ndarray:
    """Per-window metric of the mixture-mean forecast in original units.

    MASE uses the full series history before each window origin as insample.
    """
    result = forecast(model, batch, n_traj=0)
    scores = np.empty(len(batch))
    for i, (sid, origin) in enumerate(zip(batch.series_ids, batch.origins)):
        if metric == "mase":
            rec = records[sid]
            try:
                scores[i] = mase(batch.future_y[i], result.mixture_mean[i], rec.y[:origin], rec.m)
            except ValueError:
                scores[i] = np.nan
        elif metric == "mse":
            scores[i] = mse(batch.future_y[i], result.mixture_mean[i])
        else:
            raise ConfigError(f"unknown validation metric {metric!r}")
    return scores


# grid search


GRID_AXES = ("batch_size", "learning_rate", "n_states", "lookback_multiplier", "scaler")


@dataclass
class GridCell:
    params: dict
    metric: float = math.inf
    metric_std: float = 0.0
    seeds: list = field(default_factory=list)
    epochs: dict = field(default_factory=dict)
    error: Optional[str] = None


@dataclass
class GridResult:
    cells: list
    best: Optional[GridCell]
    best_model: Optional[NhmmModel] = None
    best_report: Optional[TrainReport] = None

    def table(self) -> list[dict]:
        rows = []
        for rank, c in enumerate(self.cells, 1):
            rows.append({"rank": rank, **c.params, "metric": c.metric, "metric_std": c.metric_std,
                         "n_seeds": len(c.seeds), "error": c.error or ""})
        return rows


def _sort_key(cell: GridCell, m: int):
    p = cell.params
    metric = cell.metric if math.isfinite(cell.metric) else math.inf
    return (metric, p.get("batch_size", 0), p.get("learning_rate", 0.0), p.get("n_states", 0),
            p.get("lookback_multiplier", 0.0))


def fit_on_records(records: Sequence[SeriesRecord], model_kwargs: dict, config: TrainConfig,
                   horizon: int, lookback: int, split: SplitPolicy, stride: int = 1):
    windows = make_windows(records, lookback, horizon, stride, split)
    n_signals = records[0].n_signals
    model = NhmmModel(horizon=horizon, lookback=lookback, n_signals=n_signals,
                      seed=config.seed, **model_kwargs)
    report = train(model, windows["train"], windows["validation"], config)
    return model, report, windows


def _run_cell(records, params, model_kwargs, config, horizon, m, split, stride, metric, seeds):
    cell = GridCell(params=params)
    kw = dict(model_kwargs)
    kw.setdefault("n_states", 2)
    cfg = config
    if "batch_size" in params:
        cfg = replace(cfg, batch_size=int(params["batch_size"]))
    if "learning_rate" in params:
        cfg = replace(cfg, learning_rate=float(params["learning_rate"]))
    if "n_states" in params:
        kw["n_states"] = int(params["n_states"])
    if "scaler" in params:
        kw["scaler"] = params["scaler"]
    lookback = kw.pop("lookback", m)
    if "lookback_multiplier" in params:
        lookback = max(1, int(round(params["lookback_multiplier"] * m)))
    if kw.get("signal_states") is not None:
        kw["signal_states"] = [k for k in kw["signal_states"] if k < kw.get("n_states", 2)]
    by_id = {r.id: r for r in records}
    values, best = [], None
    try:
        for seed in seeds:
            model, report, windows = fit_on_records(records, kw, replace(cfg, seed=seed),
                                                    horizon, lookback, split, stride)
            scores = window_scores(model, windows["validation"], by_id, metric)
            value = float(np.nanmean(scores))
            values.append(value)
            cell.epochs[str(seed)] = dict(report.stage_epochs)
            if best is None or value < best[0]:
                best = (value, model, report)
    except (NhmmError, ValueError, FloatingPointError) as exc:
        cell.error = f"{type(exc).__name__}: {exc}"
        return cell, None
    cell.seeds = list(seeds)
    cell.metric, cell.metric_std = summarize_replicates(values) if len(values) > 1 else (values[0], 0.0)
    return cell, best


def grid_search(records: Sequence[SeriesRecord], axes: dict, model_kwargs: dict,
                config: TrainConfig, horizon: int, split: Optional[SplitPolicy] = None,
                metric: str = "mase", budget: Optional[int] = None, seeds: Sequence[int] = (0,),
                stride: int = 1, n_jobs: int = 1) -> GridResult:
    """Train one model per grid cell and rank cells by validation metric.

    ``axes`` maps any of :data:`GRID_AXES` to candidate values.  ``budget``
    caps epochs per stage.  Failed cells are reported with their error and
    ranked last.  Ties go to the smaller batch, learning rate, state count,
    then lookback.
    """
    unknown = set(axes) - set(GRID_AXES)
    if unknown:
        raise ConfigError(f"unknown grid axes {sorted(unknown)}")
    split = split or SplitPolicy()
    if budget is not None:
        config = replace(config, max_epochs=min(config.max_epochs, budget),
                         stage2_max_epochs=min(config.stage2_max_epochs or config.max_epochs, budget))
    m = records[0].m
    names = [a for a in GRID_AXES if a in axes]
    combos = [dict(zip(names, values)) for values in itertools.product(*(axes[a] for a in names))]
    args = (model_kwargs, config, horizon, m, split, stride, metric, list(seeds))
    if n_jobs == 1:
        outcomes = [_run_cell(records, params, *args) for params in combos]
    else:
        from joblib import Parallel, delayed

        outcomes = Parallel(n_jobs=n_jobs)(delayed(_run_cell)(records, p, *args) for p in combos)
    order = sorted(range(len(outcomes)), key=lambda i: _sort_key(outcomes[i][0], m))
    cells = [outcomes[i][0] for i in order]
    result = GridResult(cells=cells, best=None)
    for i in order:
        cell, best = outcomes[i]
        if cell.error is None and best is not None:
            result.best, result.best_model, result.best_report = cell, best[1], best[2]
            break
    return result


# replicates


def summarize_replicates(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1 denominator)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ValueError("at least two replicate values are required")
    return float(values.mean()), float(values.std(ddof=1))


def replicate(run: Callable[[int], float], seeds: Sequence[int]) -> dict:
    """Evaluate ``run(seed)`` for every seed; returns mean, std and the raw values."""
    if len(seeds) < 2:
        raise ValueError("replicate needs at least two seeds")
    values = [float(run(seed)) for seed in seeds]
    mean, std = summarize_replicates(values)
    return {"mean": mean, "std": std, "values": values, "seeds": list(seeds)}
