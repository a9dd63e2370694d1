# exceptions.py
"""
Custom exceptions for the dual-branch segmentation toolkit.
"""


class DbSamError(Exception):
    """
    Base class for every error raised on purpose by this package.
    The CLI turns these into a one-line diagnostic and a nonzero exit code.
    """


class DimensionError(DbSamError):
    """
    Exception raised when tensor extents do not agree for an operation.
    The message names the offending shapes.
    """


class ConfigurationError(DbSamError):
    """
    Exception raised for invalid configuration values, unknown config keys,
    branch grids that do not line up, or convolutions whose output extent is
    not exact.
    """


class ContractError(DbSamError):
    """
    Exception raised when a caller breaks a documented precondition
    (non-scalar loss passed to backward, invalid box, missing gradient, ...).
    """


class FormatError(DbSamError):
    """
    Exception raised when a file on disk (DBSM tensors, manifest, config)
    cannot be parsed.
    """


class NonFiniteLossError(DbSamError):
    """
    Exception raised when the training loss becomes NaN or infinite.
    Signals that the run must be abandoned; ``step`` is the optimizer step
    at which it happened.
    """

    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value} at step {step}")
