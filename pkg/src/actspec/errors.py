"""Semantic exception hierarchy shared across the toolkit.

Every public function raises one of these instead of bare ValueError so that
callers (and the CLI exit-code mapping) can tell misuse apart from bad data
and from genuine numerical breakdown.
"""


class ActspecError(Exception):
    """Base class for all toolkit errors."""


class DomainError(ActspecError):
    """An argument is outside the mathematical domain of the operation."""


class ContractError(ActspecError):
    """An input violates a structural contract (shape, symmetry, ordering)."""


class DegenerateInputError(ActspecError):
    """Input is structurally valid but too degenerate to act on."""


class ConfigError(ActspecError):
    """A configuration value is invalid or inconsistent."""


class AccuracyGateError(ConfigError):
    """A model failed the accuracy gate required before compression."""

    def __init__(self, message: str, measured: float | None = None):
        super().__init__(message)
        self.measured = measured


class NumericalError(ActspecError):
    """An iterative numerical procedure failed to converge or produced NaN."""
