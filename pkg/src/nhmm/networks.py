"""Feed-forward emission, prior and posterior networks."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .errors import ConfigError, ShapeError

SIGMA_FLOOR = 1e-3
PROB_FLOOR = 1e-6

_ACTIVATIONS = {"relu": dm.relu, "tanh": dm.tanh}


class MLP:
    """Fully connected layers; the activation is skipped after the last layer."""

    def __init__(self, n_in: int, hidden: Sequence[int], n_out: int, rng: np.random.Generator,
                 activation: str = "relu", prefix: str = ""):
        if activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.activation = activation
        self.n_in = n_in
        self.layers: list[tuple[Tensor, Tensor]] = []
        sizes = [n_in, *hidden, n_out]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(a)
            weight = Tensor(rng.uniform(-bound, bound, size=(a, b)), requires_grad=True,
                            name=f"{prefix}layer{i}.weight")
            bias = Tensor(np.zeros(b), requires_grad=True, name=f"{prefix}layer{i}.bias")
            self.layers.append((weight, bias))

    def __call__(self, x) -> Tensor:
        x = dm.as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ShapeError(self.layers[0][0].name, (None, self.n_in), x.shape)
        act = _ACTIVATIONS[self.activation]
        last = len(self.layers) - 1
        for i, (weight, bias) in enumerate(self.layers):
            x = dm.matmul(x, weight) + bias
            if i < last:
                x = act(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer]


def _inputs(past_y: np.ndarray, past_w: Optional[np.ndarray], use_signal: bool, who: str,
            *extra: np.ndarray) -> np.ndarray:
    past_y = np.asarray(past_y, dtype=np.float64)
    parts = [past_y]
    if use_signal:
        if past_w is None:
            raise ShapeError(f"{who}: external signal", "(B, W, E)", None)
        past_w = np.asarray(past_w, dtype=np.float64)
        parts.append(past_w.reshape(past_w.shape[0], -1))
    parts.extend(np.asarray(e, dtype=np.float64) for e in extra)
    return np.concatenate(parts, axis=1)


class EmissionNet:
    """Gaussian emission parameters for every horizon step of one hidden state."""

    def __init__(self, state: int, lookback: int, horizon: int, n_signals: int, use_signal: bool,
                 rng, hidden=(128, 128), activation="relu"):
        self.state = state
        self.horizon = horizon
        self.use_signal = use_signal and n_signals > 0
        n_in = lookback + (lookback * n_signals if self.use_signal else 0)
        self.mlp = MLP(n_in, hidden, 2 * horizon, rng, activation, prefix=f"emission{state}.")

    def __call__(self, past_y, past_w=None) -> tuple[Tensor, Tensor]:
        out = self.mlp(_inputs(past_y, past_w, self.use_signal, f"emission{self.state}"))
        h = self.horizon
        mu = out[:, :h]
        sigma = dm.softplus(out[:, h:]) + SIGMA_FLOOR
        return mu, sigma

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()


class PriorNet:
    """Initial law ``pi`` (B, K) and transition rows ``alpha`` (B, h-1, K, K)."""

    def __init__(self, n_states: int, lookback: int, horizon: int, n_signals: int, use_signal: bool,
                 rng, hidden=(128, 128), activation="relu"):
        self.K = n_states
        self.horizon = horizon
        self.use_signal = use_signal and n_signals > 0
        n_in = lookback + (lookback * n_signals if self.use_signal else 0)
        n_out = n_states + (horizon - 1) * n_states * n_states
        self.mlp = MLP(n_in, hidden, n_out, rng, activation, prefix="prior.")

    def __call__(self, past_y, past_w=None) -> tuple[Tensor, Tensor]:
        out = self.mlp(_inputs(past_y, past_w, self.use_signal, "prior"))
        K, B = self.K, out.shape[0]
        pi = dm.softmax(out[:, :K])
        alpha = dm.softmax(dm.reshape(out[:, K:], (B, self.horizon - 1, K, K)))
        return pi, alpha

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()


class PosteriorNet:
    """Per-step state probabilities ``beta`` (B, h, K) given past and observed future."""

    def __init__(self, n_states: int, lookback: int, horizon: int, n_signals: int, use_signal: bool,
                 rng, hidden=(128, 128), activation="relu"):
        self.K = n_states
        self.horizon = horizon
        self.use_signal = use_signal and n_signals > 0
        n_in = lookback + horizon + (lookback * n_signals if self.use_signal else 0)
        self.mlp = MLP(n_in, hidden, horizon * n_states, rng, activation, prefix="posterior.")

    def __call__(self, past_y, past_w, future_y) -> Tensor:
        future_y = np.asarray(future_y, dtype=np.float64)
        if future_y.ndim != 2 or future_y.shape[1] != self.horizon:
            raise ShapeError("posterior: future_y", (None, self.horizon), future_y.shape)
        out = self.mlp(_inputs(past_y, past_w, self.use_signal, "posterior", future_y))
        return dm.softmax(dm.reshape(out, (out.shape[0], self.horizon, self.K)))

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()


def clamp_log(p: Tensor) -> Tensor:
    """``log(max(p, PROB_FLOOR))``."""
    return dm.log(dm.clamp_min(p, PROB_FLOOR))
