"""Contrastive reflection over replay groups and SFT dataset assembly."""

from __future__ import annotations

import itertools
import json
import logging
import random
import re
import tempfile
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .agent import BackendProfile, ChatMessage, complete, load_prompt
from .errors import CtxAugError, InspectionError, ReflectionError
from .hashing import digest_text, stable_hash
from .orchestrator import run_ordered
from .records import GuidanceRecord, ReplayGroup, SftExample, write_records

log = logging.getLogger(__name__)

INSPECT_KINDS = ("stat", "search", "head", "tail", "field")
MAX_LIMIT = 200
DEFAULT_BYTE_BUDGET = 16 * 1024
MAX_TOOL_CALLS = 20
TRUNCATION_MARK = "\n... [output truncated]"


# --------------------------------------------------------------------------
# subsets


@dataclass(frozen=True)
class SubsetPlan:
    m: int
    k: int
    subsets: tuple[tuple[int, ...], ...]
    cap: int | None = None


def enumerate_subsets(m: int, k: int, cap: int | None = None) -> SubsetPlan:
    """All k-of-m index subsets in lexicographic order, optionally only the first ``cap``."""
    if not 1 <= k <= m:
        raise ValueError(f"need 1 <= k <= m, got k={k}, m={m}")
    if cap is not None and cap < 1:
        raise ValueError("cap must be >= 1")
    combos = itertools.combinations(range(m), k)
    if cap is not None:
        combos = itertools.islice(combos, cap)
    return SubsetPlan(m, k, tuple(combos), cap)


# --------------------------------------------------------------------------
# sandboxed inspection


@dataclass(frozen=True)
class InspectionQuery:
    """One read-only query against a trajectory archive.

    ``path`` names a single file for head/tail/search, and ``file#dotted.path``
    for ``field`` (numeric components index into lists).
    """

    kind: str
    pattern: str | None = None
    limit: int = 20
    path: str | None = None

    def __post_init__(self):
        if self.kind not in INSPECT_KINDS:
            raise InspectionError(f"unknown inspection kind {self.kind!r}")
        if self.kind == "search" and not self.pattern:
            raise InspectionError("search requires a pattern")
        if self.kind == "field" and (not self.path or "#" not in self.path):
            raise InspectionError("field requires path of the form file#field.path")
        if not isinstance(self.limit, int) or self.limit < 1:
            raise InspectionError("limit must be a positive integer")
        if self.limit > MAX_LIMIT:
            raise InspectionError(f"limit exceeds {MAX_LIMIT}")


def _archive_files(archive: Path) -> list[Path]:
    if archive.is_file():
        return [archive]
    if not archive.is_dir():
        raise InspectionError(f"archive {archive} does not exist")
    return sorted(p for p in archive.iterdir() if p.is_file())


def _pick_file(files: list[Path], name: str) -> Path:
    for p in files:
        if p.name == name:
            return p
    raise InspectionError(f"no file named {name!r} in archive")


def _clip(text: str, budget: int) -> str:
    raw = text.encode("utf-8")
    if len(raw) <= budget:
        return text
    keep = budget - len(TRUNCATION_MARK.encode("utf-8"))
    return raw[:keep].decode("utf-8", errors="ignore") + TRUNCATION_MARK


def _lines(p: Path) -> list[str]:
    return p.read_text(encoding="utf-8").split("\n")[:-1] if p.stat().st_size else []


def inspect(archive: str | Path, q: InspectionQuery, byte_budget: int = DEFAULT_BYTE_BUDGET) -> str:
    archive = Path(archive)
    files = _archive_files(archive)
    out: list[str] = []
    if q.kind == "stat":
        for p in files:
            out.append(f"{p.name}: {p.stat().st_size} bytes, {len(_lines(p))} lines")
    elif q.kind == "search":
        try:
            rx = re.compile(q.pattern)
        except re.error as e:
            raise InspectionError(f"invalid regex {q.pattern!r}: {e}") from None
        scope = [_pick_file(files, q.path)] if q.path else files
        for p in scope:
            for n, line in enumerate(_lines(p), start=1):
                if len(out) >= q.limit:
                    break
                if rx.search(line):
                    out.append(f"{p.name}:{n}: {line}")
    elif q.kind in ("head", "tail"):
        scope = [_pick_file(files, q.path)] if q.path else files
        for p in scope:
            lines = _lines(p)
            part = lines[:q.limit] if q.kind == "head" else lines[-q.limit:]
            out.append(f"==> {p.name} <==")
            out.extend(part)
    else:
        name, _, dotted = q.path.partition("#")
        lines = _lines(_pick_file(files, name))
        if len(lines) < 2:
            raise InspectionError(f"{name} holds no record")
        value = json.loads(lines[1])
        for part in filter(None, dotted.split(".")):
            try:
                value = value[int(part)] if isinstance(value, list) else value[part]
            except (KeyError, IndexError, ValueError, TypeError):
                raise InspectionError(f"no field {dotted!r} in {name}") from None
        out.append(value if isinstance(value, str) else json.dumps(value, ensure_ascii=False))
    return _clip("\n".join(out), byte_budget)


def materialize_subset(group: ReplayGroup, subset: Sequence[int], folder: str | Path) -> Path:
    """Write the selected runs as one record file per run: ``run-<run_id>.traj.ndrec``."""
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    for i in subset:
        run = group.runs[i]
        write_records(folder / f"run-{run.run_id}.traj.ndrec", [run])
    return folder


# --------------------------------------------------------------------------
# reflection loop


_GUIDANCE = re.compile(r"<guidance>(.*?)</guidance>", re.S)
_TOOL_CALL = re.compile(r"^\s*inspect\s+(\{.*\})\s*$", re.M)


def extract_guidance(reply: str) -> str:
    """Content of the last ``<guidance>...</guidance>`` block, trimmed."""
    blocks = _GUIDANCE.findall(reply)
    if not blocks:
        raise ReflectionError("no guidance block")
    text = blocks[-1].strip()
    if not text:
        raise ReflectionError("empty guidance")
    return text


def parse_tool_call(reply: str) -> InspectionQuery | None:
    m = _TOOL_CALL.search(reply)
    if m is None:
        return None
    try:
        args = json.loads(m.group(1))
    except json.JSONDecodeError as e:
        raise InspectionError(f"tool call is not valid JSON: {e.msg}") from None
    if not isinstance(args, dict) or set(args) - {"kind", "pattern", "limit", "path"}:
        raise InspectionError("tool call accepts only kind, pattern, limit, path")
    return InspectionQuery(**args)


@dataclass(frozen=True)
class ReflectionPrompts:
    system: str
    user: str

    @classmethod
    def default(cls) -> ReflectionPrompts:
        return cls(
            load_prompt("reflection_system.txt") + "\n\n" + load_prompt("reflection_tools.txt"),
            load_prompt("reflection_user.txt"),
        )

    def render_user(self, traces_folder: str) -> str:
        return re.sub(r"\{\{\s*traces_folder\s*\}\}", lambda _: traces_folder, self.user)


NUDGE = "Reply with one inspect call, or finish with the <guidance> block."


def _reflect_in(folder: Path, group: ReplayGroup, subset: Sequence[int], backend: BackendProfile,
                prompts: ReflectionPrompts, max_tool_calls: int, byte_budget: int) -> GuidanceRecord:
    run_ids = tuple(sorted(group.runs[i].run_id for i in subset))
    seed = stable_hash(group.task.task_id, *run_ids)
    msgs = [ChatMessage("system", prompts.system), ChatMessage("user", prompts.render_user(str(folder)))]
    calls = 0
    for _ in range(max_tool_calls + 1):
        reply = complete(backend, msgs, seed=seed)
        try:
            guidance = extract_guidance(reply)
        except ReflectionError:
            pass
        else:
            return GuidanceRecord(group.task.task_id, run_ids, guidance, backend.model_name, digest_text(reply))
        msgs.append(ChatMessage("assistant", reply or "(empty)"))
        try:
            query = parse_tool_call(reply)
        except InspectionError as e:
            msgs.append(ChatMessage("tool", f"error: {e}"))
            calls += 1
            continue
        if query is None:
            msgs.append(ChatMessage("user", NUDGE))
            continue
        calls += 1
        if calls > max_tool_calls:
            break
        try:
            result = inspect(folder, query, byte_budget)
        except InspectionError as e:
            result = f"error: {e}"
        msgs.append(ChatMessage("tool", result or "(no output)"))
    raise ReflectionError("reflection produced no guidance")


def reflect(group: ReplayGroup, subset: Sequence[int], backend: BackendProfile,
            prompts: ReflectionPrompts | None = None, workdir: str | Path | None = None,
            max_tool_calls: int = MAX_TOOL_CALLS, byte_budget: int = DEFAULT_BYTE_BUDGET) -> GuidanceRecord:
    """Let the reflection model inspect the selected runs and return its guidance."""
    if not subset or any(not 0 <= i < len(group.runs) for i in subset) or len(set(subset)) != len(subset):
        raise ValueError(f"invalid subset {list(subset)} for a group of {len(group.runs)} runs")
    prompts = prompts or ReflectionPrompts.default()
    if workdir is not None:
        folder = Path(workdir) / f"{group.task.task_id}__{'-'.join(map(str, sorted(subset)))}"
        materialize_subset(group, subset, folder)
        return _reflect_in(folder, group, subset, backend, prompts, max_tool_calls, byte_budget)
    with tempfile.TemporaryDirectory(prefix="traces-") as tmp:
        materialize_subset(group, subset, tmp)
        return _reflect_in(Path(tmp), group, subset, backend, prompts, max_tool_calls, byte_budget)


# --------------------------------------------------------------------------
# datasets


@dataclass
class SkipReport:
    attempted: int = 0
    skipped: list[tuple[str, tuple[int, ...], str]] = field(default_factory=list)

    @property
    def succeeded(self) -> int:
        return self.attempted - len(self.skipped)


def build_sft_dataset(groups: Sequence[ReplayGroup], k: int, backend: BackendProfile,
                      prompts: ReflectionPrompts | None = None, cap: int | None = None,
                      concurrency: int = 1, workdir: str | Path | None = None
                      ) -> tuple[list[SftExample], SkipReport]:
    """One reflection per (task, k-subset); failed reflections are skipped and reported."""
    prompts = prompts or ReflectionPrompts.default()
    jobs = []
    for g in groups:
        if len(g.runs) < k:
            raise ValueError(f"task {g.task.task_id!r} has {len(g.runs)} runs, fewer than k={k}")
        for subset in enumerate_subsets(len(g.runs), k, cap).subsets:
            jobs.append((g, subset))

    def work(job):
        g, subset = job
        try:
            return reflect(g, subset, backend, prompts, workdir=workdir)
        except CtxAugError as e:
            return e

    report = SkipReport(attempted=len(jobs))
    examples = []
    for (g, subset), res in zip(jobs, run_ordered(work, jobs, concurrency)):
        if isinstance(res, Exception):
            ids = tuple(g.runs[i].run_id for i in subset)
            report.skipped.append((g.task.task_id, ids, str(res)))
            log.warning("reflection skipped for %s %s: %s", g.task.task_id, ids, res)
            continue
        examples.append(SftExample(g.task.description, res.guidance, res))
    if report.skipped:
        log.info("reflection: %d of %d subsets skipped", len(report.skipped), report.attempted)
    return examples, report


def split_dataset(examples: Sequence[SftExample], ratio: float = 0.8,
                  seed: int = 0) -> tuple[list[SftExample], list[SftExample]]:
    """Split by task so that all examples of one task land on the same side."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    task_ids = list(dict.fromkeys(ex.origin.task_id for ex in examples))
    if len(task_ids) < 2:
        raise ValueError("need at least 2 distinct task_ids to split")
    order = sorted(task_ids)
    random.Random(seed).shuffle(order)
    n_train = min(max(round(ratio * len(order)), 1), len(order) - 1)
    train_ids = set(order[:n_train])
    train = [ex for ex in examples if ex.origin.task_id in train_ids]
    val = [ex for ex in examples if ex.origin.task_id not in train_ids]
    return train, val


def chat_format_lines(examples: Sequence[SftExample]) -> list[str]:
    return [
        json.dumps({"messages": [{"role": "user", "content": ex.input},
                                 {"role": "assistant", "content": ex.target}]}, ensure_ascii=False)
        for ex in examples
    ]


def write_chat_jsonl(examples: Sequence[SftExample], path: str | Path) -> None:
    lines = chat_format_lines(examples)
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
