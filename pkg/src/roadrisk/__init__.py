"""Highway-incident forecasting, responder allocation and dispatch replay."""

from .errors import ConfigError, DataError, RoadRiskError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "RoadRiskError", "__version__"]
