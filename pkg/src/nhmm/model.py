"""Neural hidden Markov forecaster: ELBO, exact likelihood and trajectory sampling.

All likelihoods are evaluated in the scaled space the networks operate in;
forecasts are mapped back to original units.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import diffmath as dm
from .data import ScalerParams, WindowBatch, fit_scaler
from .diffmath import Tensor
from .errors import ConfigError, DivergenceError, ShapeError
from .networks import PROB_FLOOR, EmissionNet, PosteriorNet, PriorNet, clamp_log

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class ScaledBatch:
    past_y: np.ndarray
    future_y: np.ndarray
    past_w: Optional[np.ndarray]
    y_scaler: ScalerParams
    series_ids: np.ndarray

    def __len__(self):
        return self.past_y.shape[0]

    def subset(self, index) -> "ScaledBatch":
        return ScaledBatch(
            self.past_y[index],
            self.future_y[index],
            None if self.past_w is None else self.past_w[index],
            self.y_scaler.subset(index),
            self.series_ids[index],
        )


class NhmmModel:
    """Parameter container for K emission networks, the prior and the posterior network.

    ``signal_states`` lists the emission states that see the external signal;
    by default only the last state does (when signals exist).

    ``signal_scaling="corpus"`` scales each signal channel with one affine map
    fit on the training windows (see :meth:`fit_signal_scaler`), which keeps the
    absolute level of the signal visible to the networks.  ``"window"`` fits a
    scaler per row instead, like the target.
    """

    def __init__(self, n_states: int, horizon: int, lookback: int, n_signals: int = 0,
                 signal_states: Optional[Sequence[int]] = None, prior_uses_signal: bool = True,
                 posterior_uses_signal: bool = True, hidden: Sequence[int] = (128, 128),
                 activation: str = "relu", scaler: str = "minmax", seed: int = 0,
                 signal_scaling: str = "corpus", signal_loc: Optional[Sequence[float]] = None,
                 signal_scale: Optional[Sequence[float]] = None):
        if n_states < 1 or horizon < 1 or lookback < 1:
            raise ConfigError("n_states, horizon and lookback must be >= 1")
        if scaler not in ("minmax", "standard"):
            raise ConfigError(f"unknown scaler kind {scaler!r}")
        if signal_scaling not in ("corpus", "window"):
            raise ConfigError(f"unknown signal_scaling {signal_scaling!r}")
        if signal_states is None:
            signal_states = (n_states - 1,) if n_signals else ()
        signal_states = tuple(sorted(int(k) for k in signal_states))
        if any(k < 0 or k >= n_states for k in signal_states):
            raise ConfigError(f"signal_states {signal_states} out of range for K={n_states}")
        self.K = n_states
        self.horizon = horizon
        self.lookback = lookback
        self.n_signals = n_signals
        self.signal_states = signal_states
        self.prior_uses_signal = prior_uses_signal
        self.posterior_uses_signal = posterior_uses_signal
        self.hidden = tuple(int(x) for x in hidden)
        self.activation = activation
        self.scaler = scaler
        self.seed = seed
        self.signal_scaling = signal_scaling
        self.signal_loc = np.zeros(n_signals) if signal_loc is None else np.asarray(signal_loc, dtype=np.float64)
        self.signal_scale = np.ones(n_signals) if signal_scale is None else np.asarray(signal_scale, dtype=np.float64)
        if self.signal_loc.shape != (n_signals,) or self.signal_scale.shape != (n_signals,):
            raise ConfigError(f"signal_loc/signal_scale must have length n_signals={n_signals}")

        rng = np.random.default_rng(seed)
        kw = dict(hidden=self.hidden, activation=activation)
        self.emissions = [
            EmissionNet(k, lookback, horizon, n_signals, k in signal_states, rng, **kw)
            for k in range(n_states)
        ]
        self.prior = PriorNet(n_states, lookback, horizon, n_signals, prior_uses_signal, rng, **kw)
        self.posterior = PosteriorNet(n_states, lookback, horizon, n_signals,
                                      posterior_uses_signal, rng, **kw)

    # configuration and parameters

    def config(self) -> dict:
        return {
            "n_states": self.K,
            "horizon": self.horizon,
            "lookback": self.lookback,
            "n_signals": self.n_signals,
            "signal_states": list(self.signal_states),
            "prior_uses_signal": self.prior_uses_signal,
            "posterior_uses_signal": self.posterior_uses_signal,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "scaler": self.scaler,
            "seed": self.seed,
            "signal_scaling": self.signal_scaling,
            "signal_loc": self.signal_loc.tolist(),
            "signal_scale": self.signal_scale.tolist(),
        }

    @classmethod
    def from_config(cls, config: dict) -> "NhmmModel":
        return cls(**config)

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        return {
            "emission": [p for net in self.emissions for p in net.parameters()],
            "prior": self.prior.parameters(),
            "posterior": self.posterior.parameters(),
        }

    def parameters(self) -> list[Tensor]:
        return [p for group in self.parameter_groups().values() for p in group]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ConfigError(f"state is missing parameters {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(name, p.shape, value.shape)
            p.data = value.copy()

    def group_hash(self, group: str) -> str:
        digest = hashlib.sha256()
        for p in self.parameter_groups()[group]:
            digest.update(p.name.encode())
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()

    def fit_signal_scaler(self, batch: WindowBatch) -> None:
        """Fit the per-channel signal map on ``batch`` (a no-op for window scaling)."""
        if not self.n_signals or self.signal_scaling != "corpus":
            return
        if batch.past_w is None:
            raise ShapeError("model input: external signal", (None, self.lookback, self.n_signals), None)
        flat = batch.past_w.reshape(-1, batch.past_w.shape[2]).T
        fitted = fit_scaler(flat, self.scaler)
        self.signal_loc = fitted.loc.astype(np.float64)
        self.signal_scale = np.where(fitted.scale > 0, fitted.scale, 1.0).astype(np.float64)

    # network evaluation

    def prepare(self, batch: WindowBatch) -> ScaledBatch:
        """Scale targets by statistics of each row's past window, and the signal per ``signal_scaling``."""
        if batch.past_y.shape[1] != self.lookback:
            raise ShapeError("model input", (None, self.lookback), batch.past_y.shape)
        if self.n_signals and batch.past_w is None:
            raise ShapeError("model input: external signal", (None, self.lookback, self.n_signals), None)
        y_scaler = fit_scaler(batch.past_y, self.scaler)
        past_w = None
        if self.n_signals:
            if batch.past_w.shape[2] != self.n_signals:
                raise ShapeError("model input: external signal",
                                 (None, self.lookback, self.n_signals), batch.past_w.shape)
            if self.signal_scaling == "corpus":
                past_w = (batch.past_w - self.signal_loc) / self.signal_scale
            else:
                w = np.swapaxes(batch.past_w, 1, 2)  # (B, E, W)
                past_w = np.swapaxes(fit_scaler(w, self.scaler).transform(w), 1, 2)
        return ScaledBatch(
            past_y=y_scaler.transform(batch.past_y),
            future_y=y_scaler.transform(batch.future_y),
            past_w=past_w,
            y_scaler=y_scaler,
            series_ids=batch.series_ids,
        )

    def emission_params(self, past_y, past_w=None) -> tuple[Tensor, Tensor]:
        """Means and standard deviations stacked as (B, h, K)."""
        outs = [net(past_y, past_w) for net in self.emissions]
        mu = dm.stack([o[0] for o in outs], axis=-1)
        sigma = dm.stack([o[1] for o in outs], axis=-1)
        return mu, sigma

    def hidden_law(self, past_y, past_w=None) -> tuple[Tensor, Tensor]:
        return self.prior(past_y, past_w)

    def posterior_probs(self, past_y, past_w, future_y) -> Tensor:
        return self.posterior(past_y, past_w, future_y)


# closed-form terms


def gaussian_logpdf(y, mu, sigma) -> Tensor:
    z = (dm.as_tensor(y) - mu) / sigma
    return -0.5 * LOG_2PI - dm.log(sigma) - 0.5 * dm.square(z)


def uniform_law(batch_size: int, horizon: int, K: int) -> tuple[Tensor, Tensor]:
    return (Tensor(np.full((batch_size, K), 1.0 / K)),
            Tensor(np.full((batch_size, horizon - 1, K, K), 1.0 / K)))


def elbo_rows(y, mu, sigma, pi, alpha, beta) -> dict[str, Tensor]:
    """Per-row ELBO terms under the step-factorized posterior ``beta`` (B, h, K).

    ``mu``/``sigma``: (B, h, K); ``pi``: (B, K); ``alpha``: (B, h-1, K, K).
    """
    y = dm.as_tensor(y)
    B, h, K = beta.shape
    log_emit = gaussian_logpdf(dm.reshape(y, (B, h, 1)), mu, sigma)
    emission = dm.sum_(beta * log_emit, axis=(1, 2))
    transition = dm.sum_(beta[:, 0, :] * clamp_log(pi), axis=1)
    if h > 1:
        pair = dm.reshape(beta[:, :-1, :], (B, h - 1, K, 1)) * dm.reshape(beta[:, 1:, :], (B, h - 1, 1, K))
        transition = transition + dm.sum_(pair * clamp_log(alpha), axis=(1, 2, 3))
    entropy = dm.sum_(beta * clamp_log(beta), axis=(1, 2))
    return {"emission": emission, "transition": transition, "entropy": entropy,
            "total": emission + transition - entropy}


@dataclass
class ElboTerms:
    emission: float
    transition: float
    entropy: float
    total: float
    rows: dict = field(default_factory=dict, repr=False)


def _check_finite(rows: dict, series_ids) -> None:
    for name, t in rows.items():
        values = t.data if isinstance(t, Tensor) else np.asarray(t)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            sid = None if series_ids is None else series_ids[bad[0]]
            raise DivergenceError(f"non-finite {name} term for series {sid!r}", series_id=sid)


def elbo_graph(model: NhmmModel, scaled: ScaledBatch, uniform_prior: bool = False) -> dict[str, Tensor]:
    """Differentiable per-row ELBO terms; ``uniform_prior`` replaces the prior network."""
    mu, sigma = model.emission_params(scaled.past_y, scaled.past_w)
    beta = model.posterior_probs(scaled.past_y, scaled.past_w, scaled.future_y)
    if uniform_prior:
        pi, alpha = uniform_law(len(scaled), model.horizon, model.K)
    else:
        pi, alpha = model.hidden_law(scaled.past_y, scaled.past_w)
    rows = elbo_rows(scaled.future_y, mu, sigma, pi, alpha, beta)
    _check_finite(rows, scaled.series_ids)
    return rows


def elbo(model: NhmmModel, batch, uniform_prior: bool = False) -> ElboTerms:
    """Batch-mean ELBO terms; total = emission + transition - entropy."""
    scaled = batch if isinstance(batch, ScaledBatch) else model.prepare(batch)
    with dm.no_grad():
        rows = elbo_graph(model, scaled, uniform_prior)
    rows = {k: v.data for k, v in rows.items()}
    means = {k: float(np.mean(v)) for k, v in rows.items()}
    return ElboTerms(means["emission"], means["transition"], means["entropy"],
                     means["emission"] + means["transition"] - means["entropy"], rows)


# exact likelihood


def _numpy_params(model: NhmmModel, scaled: ScaledBatch):
    with dm.no_grad():
        mu, sigma = model.emission_params(scaled.past_y, scaled.past_w)
        pi, alpha = model.hidden_law(scaled.past_y, scaled.past_w)
    return mu.data, sigma.data, pi.data, alpha.data


def _log_emissions(y, mu, sigma) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)[:, :, None]
    return -0.5 * LOG_2PI - np.log(sigma) - 0.5 * ((y - mu) / sigma) ** 2


def _clog(p) -> np.ndarray:
    return np.log(np.maximum(p, PROB_FLOOR))


def enumerate_log_likelihood(y, mu, sigma, pi, alpha, cap: int = 10**6) -> np.ndarray:
    """Log of the sum over all K**h hidden paths of emission x transition products."""
    B, h, K = mu.shape
    if K ** h > cap:
        raise ValueError(f"K**h = {K ** h} paths exceed the cap {cap}; use forward_log_likelihood")
    log_emit = _log_emissions(y, mu, sigma)
    log_pi, log_alpha = _clog(pi), _clog(alpha)
    paths = np.array(list(itertools.product(range(K), repeat=h)), dtype=np.int64)  # (P, h)
    steps = np.arange(h)
    out = np.empty(B)
    for b in range(B):
        score = log_emit[b, steps, paths].sum(axis=1) + log_pi[b, paths[:, 0]]
        if h > 1:
            score = score + log_alpha[b, steps[:-1], paths[:, :-1], paths[:, 1:]].sum(axis=1)
        out[b] = dm.logsumexp_np(score, axis=0)
    return out


def forward_recursion(y, mu, sigma, pi, alpha) -> np.ndarray:
    """Same quantity as :func:`enumerate_log_likelihood` via the forward algorithm."""
    B, h, K = mu.shape
    log_emit = _log_emissions(y, mu, sigma)
    log_alpha = _clog(alpha)
    state = _clog(pi) + log_emit[:, 0, :]
    for s in range(1, h):
        state = dm.logsumexp_np(state[:, :, None] + log_alpha[:, s - 1], axis=1) + log_emit[:, s, :]
    return dm.logsumexp_np(state, axis=-1)


def exact_log_likelihood(model: NhmmModel, batch, cap: int = 10**6) -> np.ndarray:
    scaled = batch if isinstance(batch, ScaledBatch) else model.prepare(batch)
    if model.K ** model.horizon > cap:
        raise ValueError(
            f"K**h = {model.K ** model.horizon} paths exceed the cap {cap}; use forward_log_likelihood"
        )
    return enumerate_log_likelihood(scaled.future_y, *_numpy_params(model, scaled), cap=cap)


def forward_log_likelihood(model: NhmmModel, batch) -> np.ndarray:
    scaled = batch if isinstance(batch, ScaledBatch) else model.prepare(batch)
    return forward_recursion(scaled.future_y, *_numpy_params(model, scaled))


# forecasting


def state_marginals(pi: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """p_1 = pi, p_s = p_{s-1} @ alpha_s; returns (B, h, K)."""
    B, K = pi.shape
    h = alpha.shape[1] + 1
    out = np.empty((B, h, K))
    out[:, 0] = pi
    for s in range(1, h):
        out[:, s] = np.einsum("bj,bjk->bk", out[:, s - 1], alpha[:, s - 1])
    return out


def _categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs, axis=-1)
    return np.minimum((u[..., None] >= cum).sum(axis=-1), probs.shape[-1] - 1)


@dataclass
class ForecastResult:
    """Forecast in original units; arrays are batched over windows."""

    mu: np.ndarray  # (B, h, K)
    sigma: np.ndarray  # (B, h, K)
    marginals: np.ndarray  # (B, h, K)
    mixture_mean: np.ndarray  # (B, h)
    trajectories: np.ndarray  # (B, n_traj, h)
    paths: np.ndarray  # (B, n_traj, h)
    pi: np.ndarray = field(repr=False, default=None)
    alpha: np.ndarray = field(repr=False, default=None)


def forecast(model: NhmmModel, batch: WindowBatch, n_traj: int = 0, seed: int = 0,
             noise: bool = True) -> ForecastResult:
    """Mixture-mean forecast plus ``n_traj`` sampled trajectories per window.

    Hidden paths are drawn from the initial law then the transition chain; each
    step is drawn from the Gaussian of the active state (or set to its mean
    when ``noise`` is False).
    """
    if n_traj < 0:
        raise ValueError("n_traj must be >= 0")
    scaled = model.prepare(batch)
    mu, sigma, pi, alpha = _numpy_params(model, scaled)
    marg = state_marginals(pi, alpha)
    mixture = (marg * mu).sum(axis=-1)

    B, h, K = mu.shape
    rng = np.random.default_rng(seed)
    paths = np.zeros((B, n_traj, h), dtype=np.int64)
    traj = np.zeros((B, n_traj, h))
    if n_traj:
        u = rng.random((B, n_traj, h))
        eps = rng.standard_normal((B, n_traj, h))
        paths[:, :, 0] = _categorical(np.broadcast_to(pi[:, None, :], (B, n_traj, K)), u[:, :, 0])
        rows = np.arange(B)[:, None]
        for s in range(1, h):
            probs = alpha[rows, s - 1, paths[:, :, s - 1]]  # (B, n, K)
            paths[:, :, s] = _categorical(probs, u[:, :, s])
        steps = np.arange(h)[None, None, :]
        mu_path = mu[np.arange(B)[:, None, None], steps, paths]
        sd_path = sigma[np.arange(B)[:, None, None], steps, paths]
        traj = mu_path + (sd_path * eps if noise else 0.0)

    sc = scaled.y_scaler
    scale = sc.scale.reshape(-1, 1, 1)
    return ForecastResult(
        mu=sc.inverse(mu),
        sigma=np.where(scale > 0, sigma * scale, 0.0),
        marginals=marg,
        mixture_mean=sc.inverse(mixture),
        trajectories=sc.inverse(traj),
        paths=paths,
        pi=pi,
        alpha=alpha,
    )


def posterior_assignments(model: NhmmModel, batch) -> np.ndarray:
    """Most probable state per step under the variational posterior, (B, h)."""
    scaled = batch if isinstance(batch, ScaledBatch) else model.prepare(batch)
    with dm.no_grad():
        beta = model.posterior_probs(scaled.past_y, scaled.past_w, scaled.future_y).data
    return beta.argmax(axis=-1)
