"""Neural hidden Markov model forecaster with a small numpy autodiff engine."""
from .data import Manifest, SeriesRecord, SplitPolicy, SyntheticSpec, generate_synthetic, load_dataset, make_windows
from .errors import ConfigError, DataError, DivergenceError, NhmmError, ShapeError, UndefinedMetricError
from .estimator import NeuralHMMForecaster
from .metrics import SeasonalNaive, mae, mase, mse, snaive
from .model import NhmmModel, elbo, exact_log_likelihood, forecast, forward_log_likelihood
from .training import TrainConfig, grid_search, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DivergenceError", "Manifest", "NeuralHMMForecaster", "NhmmError",
    "NhmmModel", "SeasonalNaive", "SeriesRecord", "ShapeError", "SplitPolicy", "SyntheticSpec",
    "TrainConfig", "UndefinedMetricError", "elbo", "exact_log_likelihood", "forecast",
    "forward_log_likelihood", "generate_synthetic", "grid_search", "load_dataset", "mae",
    "make_windows", "mase", "mse", "snaive", "train",
]
