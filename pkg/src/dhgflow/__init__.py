"""FNO-guided conditional flow matching with a deconfounded constraint hierarchy."""

from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    DhgError,
    DivergenceError,
    DomainError,
    NumericalError,
    ParseError,
    ShapeError,
)

__version__ = "0.1.0"
