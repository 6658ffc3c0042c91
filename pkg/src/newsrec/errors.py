"""Exception types.  Each maps to a CLI exit code."""


class NewsRecError(Exception):
    exit_code = 1


class ConfigError(NewsRecError):
    exit_code = 1


class DataError(NewsRecError):
    exit_code = 2


class NumericError(NewsRecError):
    exit_code = 3


class ShapeError(NewsRecError, ValueError):
    exit_code = 3
