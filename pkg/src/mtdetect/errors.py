"""Exception hierarchy shared across the toolkit.

Pure numeric helpers raise plain ValueError on contract misuse; these classes
cover failures the CLI maps to exit codes.
"""


class MTDetectError(Exception):
    """Base class for toolkit errors."""


class DataError(MTDetectError):
    """Corpus or dataset files violate the expected structure."""


class ConfigError(MTDetectError):
    """Experiment configuration is invalid or references missing files."""


class BackendError(MTDetectError):
    """A classifier backend failed to train or predict."""
