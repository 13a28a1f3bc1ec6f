"""Bounded-concurrency, resumable batch execution of rollouts."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import TypeVar

from .agent import BackendProfile, compose_context, run_episode
from .errors import CtxAugError
from .hashing import stable_hash
from .minishop import Environment, EnvSpec
from .records import (
    ReplayGroup,
    RewardedTrajectory,
    TaskInstance,
    encode_records,
    group_replays,
    read_records,
    write_records,
)
from .retry import RetryPolicy, with_retries

__all__ = ["RetryPolicy", "with_retries", "run_ordered", "run_seed", "collect_replays", "ManifestMismatch"]

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

MANIFEST_NAME = "collect.manifest.json"
ARCHIVE_NAME = "replays.traj.ndrec"


class ManifestMismatch(CtxAugError):
    pass


def run_ordered(fn: Callable[[T], R], items: Sequence[T], concurrency: int = 1,
                on_done: Callable[[int, R], None] | None = None) -> list[R]:
    """Map ``fn`` over ``items`` with at most ``concurrency`` calls in flight.

    Results come back in input order whatever the completion order was.
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    results: list = [None] * len(items)
    if concurrency == 1 or len(items) <= 1:
        for i, item in enumerate(items):
            results[i] = fn(item)
            if on_done:
                on_done(i, results[i])
        return results
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        futures = {pool.submit(fn, item): i for i, item in enumerate(items)}
        for fut in futures:
            i = futures[fut]
            results[i] = fut.result()
            if on_done:
                on_done(i, results[i])
    return results


def run_seed(base_seed: int, task_id: str, run_index: int) -> int:
    return stable_hash(base_seed, task_id, run_index)


def _unit_key(task_id: str, run_index: int) -> str:
    return f"{task_id}/{run_index}"


def _inputs_digest(tasks: Sequence[TaskInstance], m: int, base_seed: int, backend: BackendProfile,
                   system_prompt: str, spec: EnvSpec) -> str:
    h = hashlib.sha256()
    h.update(encode_records(list(tasks)))
    h.update(json.dumps([m, base_seed, backend.endpoint, backend.model_name, backend.temperature,
                         spec.env_name, spec.max_turns, system_prompt]).encode("utf-8"))
    return h.hexdigest()


def _write_json_atomic(path: Path, doc: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def collect_replays(tasks: Sequence[TaskInstance], m: int, concurrency: int, backend: BackendProfile,
                    env_factory: Callable[[], Environment], system_prompt: str, base_seed: int,
                    spec: EnvSpec = EnvSpec(), out_dir: str | Path | None = None) -> list[ReplayGroup]:
    """Run every task ``m`` times and group the rewarded trajectories.

    With ``out_dir`` the run is resumable: each finished unit is stored under
    ``units/`` and marked done in the manifest, and a rerun only executes
    units that are not marked done. The archive ``replays.traj.ndrec`` is
    written in canonical (task, run) order.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    units = [(task, r) for task in tasks for r in range(m)]
    digest = _inputs_digest(tasks, m, base_seed, backend, system_prompt, spec)

    status = {_unit_key(t.task_id, r): "pending" for t, r in units}
    manifest_path = units_dir = None
    if out_dir is not None:
        out = Path(out_dir)
        units_dir = out / "units"
        units_dir.mkdir(parents=True, exist_ok=True)
        manifest_path = out / MANIFEST_NAME
        if manifest_path.exists():
            old = json.loads(manifest_path.read_text(encoding="utf-8"))
            if old.get("inputs_digest") != digest:
                raise ManifestMismatch(f"{manifest_path}: inputs changed since the manifest was written")
            for key, st in old.get("units", {}).items():
                if key in status:
                    status[key] = st

    lock = threading.Lock()

    def save_manifest():
        if manifest_path is None:
            return
        _write_json_atomic(manifest_path, {
            "format_version": 1,
            "kind": "collect",
            "inputs_digest": digest,
            "m": m,
            "base_seed": base_seed,
            "units": {_unit_key(t.task_id, r): status[_unit_key(t.task_id, r)] for t, r in units},
            "outputs": {"archive": ARCHIVE_NAME, "units": "units/"},
        })

    def unit_path(idx: int) -> Path:
        return units_dir / f"{idx:06d}.traj.ndrec"

    def work(idx: int) -> RewardedTrajectory:
        task, r = units[idx]
        key = _unit_key(task.task_id, r)
        if units_dir is not None and status[key] == "done" and unit_path(idx).exists():
            return read_records(unit_path(idx), expect="rewarded_trajectory")[0]
        t0 = time.perf_counter()
        try:
            rt = run_episode(env_factory(), compose_context(task, None), backend, system_prompt, spec,
                             seed=run_seed(base_seed, task.task_id, r), run_id=r)
        except Exception:
            with lock:
                status[key] = "failed"
                save_manifest()
            log.info("unit=%s status=failed seconds=%.3f", key, time.perf_counter() - t0)
            raise
        if units_dir is not None:
            write_records(unit_path(idx), [rt])
        with lock:
            status[key] = "done"
            save_manifest()
        log.info("unit=%s status=done seconds=%.3f", key, time.perf_counter() - t0)
        return rt

    results = run_ordered(work, list(range(len(units))), concurrency)
    save_manifest()
    if out_dir is not None:
        write_records(Path(out_dir) / ARCHIVE_NAME, results)
    return group_replays(results, {t.task_id: t for t in tasks})

