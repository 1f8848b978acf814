"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage problems exit 2, data and
checkpoint problems exit 3, numeric failures exit 4.
"""


class LightFormerError(Exception):
    exit_code = 1


class ShapeError(LightFormerError, ValueError):
    exit_code = 2


class ContractError(LightFormerError, ValueError):
    exit_code = 2


class ConfigError(LightFormerError, ValueError):
    exit_code = 2


class DataError(LightFormerError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class CheckpointError(DataError):
    pass


class VersionError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


class NumericError(LightFormerError, ArithmeticError):
    exit_code = 4


class ConfigMismatchError(VersionError):
    """A checkpoint was written for a different model configuration."""

    def __init__(self, field, found, expected):
        self.field = field
        super().__init__(f"checkpoint config field {field!r} is {found!r}, expected {expected!r}")
