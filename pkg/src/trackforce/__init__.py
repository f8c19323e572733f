"""Hand-to-robot retargeting, force-aware imitation, and gripper force control."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    DegeneracyError,
    DomainError,
    TrackforceError,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DegeneracyError",
    "DomainError",
    "TrackforceError",
    "__version__",
]
