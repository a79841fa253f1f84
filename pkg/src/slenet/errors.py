"""Exception types shared across the package.

Each carries the process exit status the CLI maps it to.
"""


class SlenetError(Exception):
    exit_code = 1


class ConfigError(SlenetError):
    exit_code = 2


class ShapeError(SlenetError, ValueError):
    exit_code = 2


class DataError(SlenetError):
    exit_code = 3


class NumericalError(SlenetError):
    exit_code = 4
