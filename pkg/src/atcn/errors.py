"""Exception hierarchy shared by every module."""

from __future__ import annotations


class AtcnError(Exception):
    pass


class ConfigError(AtcnError, ValueError):
    """Invalid configuration or inconsistent dimensions."""


class ShapeError(AtcnError, ValueError):
    pass


class InputError(AtcnError, ValueError):
    """Bad runtime input such as a window of the wrong length."""


class WindowTooShortError(InputError):
    pass


class StateError(AtcnError, RuntimeError):
    pass


class ParseError(AtcnError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(AtcnError, ValueError):
    pass


class AlignmentError(AtcnError, ValueError):
    pass


class OptimizerError(AtcnError, FloatingPointError):
    def __init__(self, param_name: str):
        self.param_name = param_name
        super().__init__(f"non-finite gradient in parameter {param_name!r}; step rejected")


class TrainingDiverged(AtcnError, RuntimeError):
    def __init__(self, epoch: int, message: str = "loss became non-finite"):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")
