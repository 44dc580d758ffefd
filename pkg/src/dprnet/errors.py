"""Exception hierarchy. Each category maps to a stable CLI exit code."""


class DprError(Exception):
    exit_code = 1


class ConfigError(DprError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    pass


class ContractError(ConfigError):
    pass


class DataError(DprError):
    exit_code = 3


class NumericError(DprError, ArithmeticError):
    exit_code = 4


class UndefinedDiagnosticError(NumericError):
    """A diagnostic is mathematically undefined for the given series (e.g. constant)."""


class CheckpointError(DprError):
    exit_code = 5
