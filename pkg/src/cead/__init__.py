"""Cluster, estimate, activate and decide: factor-model analysis of fMRI time series."""
from .errors import CeadError, NumericalError, ValidationError

__version__ = "0.1.0"

__all__ = ["CeadError", "NumericalError", "ValidationError", "__version__"]
