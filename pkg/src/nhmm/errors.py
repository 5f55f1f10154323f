"""Exception hierarchy; each class maps to a distinct CLI exit code."""


class NhmmError(Exception):
    exit_code = 1


class ConfigError(NhmmError, ValueError):
    exit_code = 2


class DataError(NhmmError, ValueError):
    exit_code = 3


class DivergenceError(NhmmError, FloatingPointError):
    """A loss or gradient became non-finite."""

    exit_code = 4

    def __init__(self, message, series_id=None, step=None):
        super().__init__(message)
        self.series_id = series_id
        self.step = step


class ShapeError(NhmmError, ValueError):
    def __init__(self, node, expected, actual):
        self.node = node
        self.expected = expected
        self.actual = actual
        super().__init__(f"{node}: shape mismatch, expected {expected}, got {actual}")


class UndefinedMetricError(NhmmError, ValueError):
    exit_code = 3
