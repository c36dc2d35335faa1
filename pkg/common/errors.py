"""Exception hierarchy. Each class carries the exit code the CLI returns for it."""
from typing import Optional


class TasfarError(Exception):
    exit_code = 1


class ConfigurationError(TasfarError):
    exit_code = 2


class DataError(TasfarError):
    exit_code = 3


class SchemaError(DataError):
    pass


class DataIOError(DataError):
    pass


class ShapeError(DataError):
    pass


class DegenerateFitError(DataError):
    pass


class DomainError(DataError):
    pass


class EmptyWindowError(DataError):
    """No grid cell centre lies inside the 3-sigma locality window."""


class PipelineError(DataError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class NumericError(TasfarError):
    exit_code = 4


class NumericDivergenceError(NumericError):
    def __init__(self, epoch: int, message: str,
                 loss_history: Optional[list[float]] = None):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch
        self.loss_history = list(loss_history or [])
        self.report = None  # filled by the pipeline with the partial report
