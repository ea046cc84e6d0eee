"""Exception hierarchy shared by every module."""

from __future__ import annotations


class MVSLError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MVSLError, ValueError):
    """Invalid dimensions, indices or hyperparameters."""


class InputError(MVSLError, ValueError):
    """A tensor or sequence does not match the configured shapes."""


class TokenizationError(InputError):
    pass


class NumericError(MVSLError, ArithmeticError):
    """Non-finite values or degenerate (zero-norm) vectors."""


class ValidationError(MVSLError, ValueError):
    """A file parsed but violates its schema invariants."""


class EpisodeError(MVSLError, ValueError):
    pass


class CheckpointError(MVSLError):
    """Checkpoint could not be parsed."""


class IncompatibleCheckpointError(CheckpointError):
    """Checkpoint fingerprint does not match the expected encoder config."""


class NonFiniteLossError(NumericError):
    """Training produced a non-finite loss.

    ``component`` names the offending loss term and ``last_good`` carries the
    most recent state whose loss was finite.
    """

    def __init__(self, component: str, step: int, last_good=None):
        super().__init__(f"non-finite loss component {component!r} at step {step}")
        self.component = component
        self.step = step
        self.last_good = last_good
