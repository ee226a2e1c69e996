"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes (config 2, data 3, numeric 4).
"""


class FewShotError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(FewShotError, ValueError):
    """Shapes, geometries or settings that do not conform."""

    exit_code = 2


class ContractError(ConfigError):
    """A caller violated an operation's precondition (e.g. non-scalar loss)."""


class DataError(FewShotError):
    """Malformed or missing on-disk data."""

    exit_code = 3


class NumericError(FewShotError, ArithmeticError):
    """An operation produced NaN or Inf."""

    exit_code = 4
