from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass
from typing import TypeVar

from .errors import BackendError

T = TypeVar("T")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base: float = 0.5
    backoff_multiplier: float = 2.0
    retryable: tuple[type[BaseException], ...] = ()

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def is_retryable(self, exc: BaseException) -> bool:
        if isinstance(exc, BackendError):
            return exc.retryable
        return isinstance(exc, self.retryable)

    def delay(self, attempt: int) -> float:
        return self.backoff_base * self.backoff_multiplier ** (attempt - 1)


NO_BACKOFF = RetryPolicy(backoff_base=0.0)


def with_retries(operation: Callable[[], T], policy: RetryPolicy = RetryPolicy(),
                 sleep: Callable[[float], None] = time.sleep) -> tuple[T, int]:
    """Run ``operation`` until it succeeds, returning ``(result, attempts)``.

    Transient errors are retried with exponential backoff; anything else
    propagates on the spot. When attempts run out, the last error is raised
    with ``attempts`` and ``history`` set.
    """
    history: list[str] = []
    for attempt in range(1, policy.max_attempts + 1):
        try:
            return operation(), attempt
        except Exception as exc:  # noqa: BLE001
            history.append(f"attempt {attempt}: {exc}")
            if not policy.is_retryable(exc) or attempt == policy.max_attempts:
                if isinstance(exc, BackendError):
                    exc.attempts = attempt
                    exc.history = history
                raise
            sleep(policy.delay(attempt))
    raise AssertionError("unreachable")
