class FlowcastError(Exception):
    exit_code = 1


class ConfigError(FlowcastError, ValueError):
    """Invalid configuration or arguments, detected before any data is touched."""

    exit_code = 1


class DataError(FlowcastError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class NumericError(FlowcastError, ArithmeticError):
    """Non-finite values during a forward pass, training or scoring."""

    exit_code = 3
