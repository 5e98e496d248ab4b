"""Exception hierarchy. Every error raised on purpose by the package derives from CVAError."""


class CVAError(Exception):
    pass


class DimensionError(CVAError, ValueError):
    pass


class RangeError(CVAError, ValueError):
    pass


class ContractError(CVAError, ValueError):
    pass


class ConfigError(CVAError, ValueError):
    pass


class FormatError(CVAError, ValueError):
    pass


class DataError(CVAError, ValueError):
    pass


class InputError(CVAError, ValueError):
    pass


class SamplingError(CVAError, RuntimeError):
    pass


class AugmentationError(CVAError, RuntimeError):
    pass


class LoadError(CVAError, ValueError):
    pass


class ParseError(CVAError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class NumericalError(CVAError, FloatingPointError):
    pass


class DegenerateInputError(DataError):
    pass
