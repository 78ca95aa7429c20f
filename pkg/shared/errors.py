from typing import Any, Optional


class WorkbenchError(Exception):
    """Base error; `exit_code` is what the command line exits with."""
    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigError(WorkbenchError):
    exit_code = 1


class DataError(WorkbenchError):
    exit_code = 2


class UnknownCategoryError(DataError):

    def __init__(self, raw: str):
        super().__init__(f"Unknown category string: {raw!r}")
        self.raw = raw


class CorrelationError(DataError):
    pass


class ModelShapeError(DataError):
    pass


class NumericalError(WorkbenchError):
    exit_code = 3

    def __init__(self, detail: str, last_state: Optional[Any] = None, iteration: Optional[int] = None):
        super().__init__(detail)
        self.last_state = last_state
        self.iteration = iteration
