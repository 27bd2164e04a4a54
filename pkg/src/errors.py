"""Exception hierarchy shared by every stage.

Each class carries the process exit code the CLI maps it to.
"""

from typing import Optional


class LovmeError(Exception):
    exit_code: int = 1


class ConfigError(LovmeError, ValueError):
    exit_code = 2


class ParameterError(LovmeError, ValueError):
    exit_code = 2


class ShapeError(LovmeError, ValueError):
    exit_code = 3


class FormatError(LovmeError, ValueError):
    """A file that does not follow its declared binary or text layout."""

    exit_code = 3

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class NumericError(LovmeError, ArithmeticError):
    exit_code = 4


class CapacityError(LovmeError, ValueError):
    exit_code = 2


class TrainingError(LovmeError, RuntimeError):
    exit_code = 4

    def __init__(self, message: str, epoch: int, seed: Optional[int] = None):
        self.epoch = epoch
        self.seed = seed
        prefix = f"epoch {epoch}" if seed is None else f"seed {seed}, epoch {epoch}"
        super().__init__(f"{prefix}: {message}")


class ChainError(LovmeError, RuntimeError):
    exit_code = 4

    def __init__(self, message: str, step: int, sample_id: Optional[int] = None):
        self.step = step
        self.sample_id = sample_id
        prefix = f"step {step}"
        if sample_id is not None:
            prefix = f"sample {sample_id}, {prefix}"
        super().__init__(f"{prefix}: {message}")


class EvaluationError(LovmeError, ValueError):
    exit_code = 4


class StageError(LovmeError, RuntimeError):
    """Wraps the error that halted one pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"stage '{stage}' failed: {cause}")
