"""Exception types shared across the package.

Each maps to a CLI exit code: ConfigError -> 1, DataError -> 2, NumericError -> 3.
"""


class ConfigError(ValueError):
    """Bad configuration: unknown key, unparsable value, inconsistent settings."""


class DataError(ValueError):
    """Bad or missing data: empty dataset, malformed folder layout, bad image."""


class NumericError(ArithmeticError):
    """Numerical failure: non-finite loss, diverged training run."""
