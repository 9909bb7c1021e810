"""Porosity- and depth-conditioned GAN pipeline for pore-scale images."""

__version__ = "0.1.0"

from .core import (ConditionVector, DepthLabel, DivergenceError, PatchRecord, StateError,  # noqa: E402
                   ValidationError)

__all__ = ["__version__", "ConditionVector", "DepthLabel", "DivergenceError", "PatchRecord",
           "StateError", "ValidationError"]
