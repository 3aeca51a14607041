class ConfigError(Exception):
    """Invalid or inconsistent run configuration (CLI exit code 2)."""


class DataError(Exception):
    """Malformed or inconsistent input data (CLI exit code 3)."""


class DivergenceError(Exception):
    """Optimization produced a non-finite loss (CLI exit code 4)."""
