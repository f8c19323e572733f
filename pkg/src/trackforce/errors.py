"""Exception types shared across the package.

The CLI maps these onto exit codes (config 2, contract 3, degeneracy 4),
so library code should raise the most specific class that applies.
"""


class TrackforceError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(TrackforceError):
    """An operation was called with inputs violating its preconditions."""


class DomainError(TrackforceError):
    """Input is outside the mathematical domain of an operation
    (e.g. projecting a point at or behind the camera plane)."""


class DegeneracyError(TrackforceError):
    """A geometric or numerical problem has no well-defined solution.

    Carries the condition number of the underlying system when one is
    available (``None`` otherwise).
    """

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class ConfigError(TrackforceError):
    """Bad run configuration: missing files, unknown tasks, invalid flags."""
