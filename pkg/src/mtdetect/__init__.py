"""Toolkit for building balanced human-vs-machine translation datasets and
training/evaluating detection classifiers on them."""

__version__ = "0.1.0"

from mtdetect.errors import BackendError, ConfigError, DataError, MTDetectError

__all__ = [
    "__version__",
    "MTDetectError",
    "DataError",
    "ConfigError",
    "BackendError",
]
