"""Flow forecasting with a stacked IndRNN -> LSTM network and residual-threshold
anomaly detection for network flow records."""

from flowcast.errors import ConfigError, DataError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericError", "__version__"]
