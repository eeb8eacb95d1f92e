"""Exception hierarchy shared across the toolkit.

The CLI maps ToolkitError (and subclasses) to exit code 1; argument
problems are left to click, which exits 2.
"""


class ToolkitError(Exception):
    """Base class for data/model errors raised by the toolkit."""


class DataError(ToolkitError):
    """Malformed dataset, vocab, or results file."""


class CheckpointError(ToolkitError):
    """Invalid or inconsistent checkpoint on disk."""


class ConfigError(ToolkitError):
    """Invalid attack or training configuration."""
