"""Source-free, adversarially robust domain adaptation at desk scale.

The package trains standard and adversarially robust source models on a
synthetic (or CSV) source domain, then adapts them to an unlabeled target
domain without touching source data again. Robust target adaptation is
supervised by pseudo-labels from the *standard* adapted model.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    CoverageError,
    DegenerateError,
    DimensionError,
    DomainError,
    LabelError,
    NumericError,
    ParseError,
    RobustSFDAError,
    SchemaError,
    StateError,
    ValidationError,
)

__all__ = [
    "__version__",
    "ConfigError",
    "CoverageError",
    "DegenerateError",
    "DimensionError",
    "DomainError",
    "LabelError",
    "NumericError",
    "ParseError",
    "RobustSFDAError",
    "SchemaError",
    "StateError",
    "ValidationError",
]
