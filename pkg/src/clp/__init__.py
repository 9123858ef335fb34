"""Learned logit perturbation with causally augmented metadata, on a numpy autodiff core."""

from .errors import (AugmentationError, CLPError, ConfigError, ConformanceError,
                     ContractError, DomainError, FormatError, InfeasibleError,
                     NumericError, VersioningError)

__version__ = "0.1.0"
