"""Error taxonomy shared by the library, service, and CLI.

The CLI maps these onto exit codes: ConfigError -> 1, NumericalError -> 2.
"""


class McamError(Exception):
    """Base class for all package errors."""


class ConfigError(McamError):
    """Invalid configuration, inputs, shapes, or on-disk artifacts."""


class CheckpointError(ConfigError):
    """Corrupt or incompatible checkpoint file."""


class NumericalError(McamError):
    """Non-finite values produced during training or evaluation."""
