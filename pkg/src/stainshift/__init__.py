"""Unpaired FF to FFPE stain translation with an adapted one-step diffusion generator."""

from .errors import (CheckpointError, ConfigError, DataError, DimensionError, FusionShapeError,
                     LoadError, NumericError, StainShiftError)

__version__ = "0.1.0"

__all__ = ["CheckpointError", "ConfigError", "DataError", "DimensionError", "FusionShapeError",
           "LoadError", "NumericError", "StainShiftError", "__version__"]
