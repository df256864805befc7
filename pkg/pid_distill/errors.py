from __future__ import annotations


class PidError(RuntimeError):
    pass


class ConfigError(PidError, ValueError):
    pass


class InputError(PidError, ValueError):
    pass


class DomainError(InputError):
    pass


class NumericalError(PidError):
    def __init__(self, message: str, *, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
