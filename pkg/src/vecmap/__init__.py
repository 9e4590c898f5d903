"""Online vectorized HD map construction with history-map and future guidance, at desk scale."""
from .config import PipelineConfig
from .errors import (ConfigError, ContractError, DegenerateGeometryError, DimensionError, FormatError,
                     NumericError, VecmapError)

__version__ = "0.1.0"

__all__ = ["PipelineConfig", "VecmapError", "DimensionError", "ContractError", "ConfigError",
           "DegenerateGeometryError", "NumericError", "FormatError", "__version__"]
