from __future__ import annotations


class CtxAugError(Exception):
    """Base class for domain errors raised by this package."""


class RecordFormatError(CtxAugError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class UnknownTaskError(CtxAugError):
    pass


class EnvError(CtxAugError):
    pass


class ContractViolation(CtxAugError):
    pass


class BackendError(CtxAugError):
    """Raised by chat/embedding backends. ``attempts`` is filled in by retries."""

    retryable = False

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts
        self.history: list[str] = []

    def __str__(self) -> str:
        base = super().__str__()
        if self.attempts > 1:
            return f"{base} (after {self.attempts} attempts)"
        return base


class TransientBackendError(BackendError):
    retryable = True


class PermanentBackendError(BackendError):
    retryable = False


class InspectionError(CtxAugError):
    pass


class ReflectionError(CtxAugError):
    pass


class ConfigError(CtxAugError):
    pass
