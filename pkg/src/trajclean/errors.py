"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
DivergenceError -> 4.
"""


class TrajcleanError(Exception):
    pass


class ConfigError(TrajcleanError):
    """Invalid configuration value or argument."""


class DataError(TrajcleanError):
    """Malformed, truncated, or inconsistent dataset/checkpoint file."""


class DivergenceError(TrajcleanError):
    """Training or recovery produced non-finite or runaway values."""
