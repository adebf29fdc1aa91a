"""Shared exception types.

Exit-code mapping used by the CLI: ConfigError -> 2, NumericalAbort -> 3.
"""


class EchoTrackError(Exception):
    """Base class for all package errors."""


class DimensionError(EchoTrackError):
    """Operand shapes are incompatible with the requested operation."""


class ContractViolationError(EchoTrackError):
    """An input violates a numerical precondition (e.g. non-Hermitian matrix)."""


class SingularMatrixError(EchoTrackError):
    """Rank-deficient system; carries the effective rank found."""

    def __init__(self, message: str, effective_rank: int):
        super().__init__(message)
        self.effective_rank = effective_rank


class ConfigError(EchoTrackError):
    """Invalid configuration (bad value, unknown key, broken invariant)."""


class NumericalAbort(EchoTrackError):
    """Non-recoverable numerical failure during a run."""


class CheckpointError(EchoTrackError):
    """Checkpoint file is corrupted or has an incompatible version."""
