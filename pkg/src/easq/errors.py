"""Exception hierarchy shared by the library and the command line."""


class EasqError(Exception):
    exit_code = 1


class ConfigError(EasqError, ValueError):
    exit_code = 2


class DataError(EasqError, ValueError):
    exit_code = 3


class InsufficientDataError(EasqError):
    exit_code = 4


class NumericError(EasqError, ArithmeticError):
    exit_code = 5


class DimensionError(EasqError, ValueError):
    pass


class ContractError(EasqError, ValueError):
    pass


class CheckpointError(EasqError):
    exit_code = 3


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
