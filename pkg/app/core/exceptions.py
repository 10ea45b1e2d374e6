from typing import Sequence


class XddaError(Exception):
    """Base class for every error contract in the package"""


class DimensionError(XddaError):
    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class ContractError(XddaError):
    pass


class NumericError(XddaError):
    pass


class ParameterError(XddaError):
    pass


class ConfigError(XddaError):
    pass


class DataFileError(XddaError):
    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{message}: {self.path}")
