"""Simulator and analysis pipeline for an NV-diamond ensemble magnetometer."""

from .errors import ConfigError, FitError, InvalidInputError, NoZeroCrossingError, NvlabError

__version__ = "0.1.0"

__all__ = ["ConfigError", "FitError", "InvalidInputError", "NoZeroCrossingError", "NvlabError", "__version__"]
