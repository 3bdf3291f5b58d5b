"""Blind quality assessment for omnidirectional (ERP) images."""

from .config import RunConfig
from .errors import CheckpointError, ConfigError, DataError, NumericalError, OmniQAError
from .model import QualityModel

__version__ = "0.1.0"

__all__ = ["RunConfig", "QualityModel", "OmniQAError", "ConfigError", "DataError",
           "CheckpointError", "NumericalError", "__version__"]
