from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

import ctxaug  # noqa: F401  registers the built-in mocks
from ctxaug.agent import BackendProfile, load_prompt
from ctxaug.minishop import make_minishop_task
from ctxaug.retry import NO_BACKOFF

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def shopper() -> BackendProfile:
    return BackendProfile("mock:minishop-shopper", retry=NO_BACKOFF)


@pytest.fixture
def reflector() -> BackendProfile:
    return BackendProfile("mock:minishop-reflector", retry=NO_BACKOFF)


@pytest.fixture(scope="session")
def system_prompt() -> str:
    return load_prompt("minishop_system.txt")


@pytest.fixture(scope="session")
def hard_tasks():
    return [make_minishop_task(s, "hard")[0] for s in range(20)]


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("tests.test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        ok, detail = acceptance.RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}: {detail}")
