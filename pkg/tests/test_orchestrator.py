from __future__ import annotations

import json
import logging
import threading
import time

import pytest

from ctxaug.agent import BackendProfile, register_mock
from ctxaug.errors import PermanentBackendError, TransientBackendError
from ctxaug.minishop import MiniShop, make_minishop_task
from ctxaug.mocks import shopper as shopper_policy
from ctxaug.orchestrator import ARCHIVE_NAME, MANIFEST_NAME, ManifestMismatch, collect_replays, run_ordered, run_seed
from ctxaug.retry import NO_BACKOFF, RetryPolicy, with_retries


def _failing(times, exc=TransientBackendError):
    calls = []

    def op():
        calls.append(1)
        if len(calls) <= times:
            raise exc(f"failure {len(calls)}")
        return "ok"

    return op, calls


def test_retry_recovers_on_third_attempt():
    op, _ = _failing(2)
    assert with_retries(op, NO_BACKOFF) == ("ok", 3)


def test_permanent_error_is_not_retried():
    op, calls = _failing(5, PermanentBackendError)
    with pytest.raises(PermanentBackendError) as info:
        with_retries(op, NO_BACKOFF)
    assert len(calls) == 1 and info.value.attempts == 1


def test_exhausted_retries_carry_history():
    op, calls = _failing(99)
    with pytest.raises(TransientBackendError) as info:
        with_retries(op, NO_BACKOFF)
    assert len(calls) == 3 and info.value.attempts == 3
    assert info.value.history == [f"attempt {i}: failure {i}" for i in (1, 2, 3)]


def test_backoff_is_exponential():
    slept = []
    op, _ = _failing(3)
    with_retries(op, RetryPolicy(max_attempts=4, backoff_base=0.5, backoff_multiplier=2.0), sleep=slept.append)
    assert slept == [0.5, 1.0, 2.0]


def test_retry_policy_invariant():
    with pytest.raises(ValueError):
        RetryPolicy(max_attempts=0)


def test_run_ordered_bounds_concurrency_and_keeps_order():
    live, peak, lock = [0], [0], threading.Lock()

    def work(x):
        with lock:
            live[0] += 1
            peak[0] = max(peak[0], live[0])
        time.sleep(0.002 * (7 - x % 7))
        with lock:
            live[0] -= 1
        return x * x

    assert run_ordered(work, list(range(30)), concurrency=4) == [x * x for x in range(30)]
    assert peak[0] <= 4


def test_run_seed_depends_only_on_inputs():
    assert run_seed(3, "task", 2) == run_seed(3, "task", 2)
    assert len({run_seed(3, "task", r) for r in range(6)}) == 6


@pytest.fixture
def four_tasks():
    return [make_minishop_task(s, "hard")[0] for s in range(4)]


def test_collect_four_tasks_six_runs(four_tasks, shopper, system_prompt):
    groups = collect_replays(four_tasks, 6, 1, shopper, MiniShop, system_prompt, base_seed=0)
    assert [len(g.runs) for g in groups] == [6] * 4
    assert [g.task.task_id for g in groups] == [t.task_id for t in four_tasks]
    assert all(rt.trajectory.seed == run_seed(0, g.task.task_id, rt.run_id) for g in groups for rt in g.runs)


@pytest.mark.parametrize("concurrency", [2, 8])
def test_archive_independent_of_concurrency(four_tasks, shopper, system_prompt, tmp_path, concurrency):
    collect_replays(four_tasks, 6, 1, shopper, MiniShop, system_prompt, 0, out_dir=tmp_path / "c1")
    collect_replays(four_tasks, 6, concurrency, shopper, MiniShop, system_prompt, 0, out_dir=tmp_path / "cn")
    assert (tmp_path / "c1" / ARCHIVE_NAME).read_bytes() == (tmp_path / "cn" / ARCHIVE_NAME).read_bytes()


def _counting_backend(name):
    calls = {"episodes": 0}

    def respond(messages, seed=None):
        if len(messages) == 2:  # first turn of a new episode
            calls["episodes"] += 1
        return shopper_policy(messages, seed)

    register_mock(name, respond)
    return BackendProfile(f"mock:{name}", retry=NO_BACKOFF), calls


def test_resume_reexecutes_only_missing_units(four_tasks, system_prompt, tmp_path):
    backend, calls = _counting_backend("counting-shopper")
    first = collect_replays(four_tasks, 6, 4, backend, MiniShop, system_prompt, 0, out_dir=tmp_path)
    assert calls["episodes"] == 24
    archive = (tmp_path / ARCHIVE_NAME).read_bytes()

    manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
    for key in list(manifest["units"])[5:7]:
        del manifest["units"][key]
    (tmp_path / MANIFEST_NAME).write_text(json.dumps(manifest))

    calls["episodes"] = 0
    again = collect_replays(four_tasks, 6, 4, backend, MiniShop, system_prompt, 0, out_dir=tmp_path)
    assert calls["episodes"] == 2
    assert again == first and (tmp_path / ARCHIVE_NAME).read_bytes() == archive

    calls["episodes"] = 0
    collect_replays(four_tasks, 6, 4, backend, MiniShop, system_prompt, 0, out_dir=tmp_path)
    assert calls["episodes"] == 0


def test_resume_with_changed_inputs_is_rejected(four_tasks, shopper, system_prompt, tmp_path):
    collect_replays(four_tasks, 2, 1, shopper, MiniShop, system_prompt, 0, out_dir=tmp_path)
    with pytest.raises(ManifestMismatch):
        collect_replays(four_tasks, 2, 1, shopper, MiniShop, system_prompt, 1, out_dir=tmp_path)


def test_manifest_covers_planned_units(four_tasks, shopper, system_prompt, tmp_path):
    collect_replays(four_tasks, 3, 2, shopper, MiniShop, system_prompt, 0, out_dir=tmp_path)
    manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
    assert set(manifest["units"]) == {f"{t.task_id}/{r}" for t in four_tasks for r in range(3)}
    assert set(manifest["units"].values()) == {"done"}


def test_progress_logged_per_unit(four_tasks, shopper, system_prompt, caplog):
    with caplog.at_level(logging.INFO, logger="ctxaug.orchestrator"):
        collect_replays(four_tasks[:2], 2, 1, shopper, MiniShop, system_prompt, 0)
    lines = [r.getMessage() for r in caplog.records if r.getMessage().startswith("unit=")]
    assert len(lines) == 4 and all("status=done" in ln and "seconds=" in ln for ln in lines)


def test_collect_preconditions(four_tasks, shopper, system_prompt):
    with pytest.raises(ValueError):
        collect_replays(four_tasks, 0, 1, shopper, MiniShop, system_prompt, 0)
    with pytest.raises(ValueError):
        collect_replays(four_tasks, 1, 0, shopper, MiniShop, system_prompt, 0)
