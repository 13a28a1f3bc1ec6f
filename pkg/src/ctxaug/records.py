"""Domain records, validation and the newline-delimited record codec.

Every artifact the pipeline writes (replay archives, guidance, SFT data,
vector stores, checkpoints, reports) is a record file: one JSON header line
``{"format_version": 1, "kind": ...}`` followed by one JSON object per line,
UTF-8, keys in the order documented in ``docs/FORMATS.md``.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

from .errors import RecordFormatError, UnknownTaskError

FORMAT_VERSION = 1
SPLITS = ("train", "test")
TERMINATIONS = ("agent_done", "max_turns", "backend_error")
U64_MAX = 2**64 - 1


@dataclass(frozen=True)
class TaskInstance:
    task_id: str
    scenario_id: str
    description: str
    split: str = "train"
    metadata: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class StepRecord:
    index: int
    action: str
    observation: str
    tool_name: str | None = None


@dataclass(frozen=True)
class Trajectory:
    task_id: str
    run_id: int
    seed: int
    steps: tuple[StepRecord, ...]
    terminated: str
    turn_count: int

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))


@dataclass(frozen=True)
class RewardedTrajectory:
    trajectory: Trajectory
    reward: float

    @property
    def task_id(self) -> str:
        return self.trajectory.task_id

    @property
    def run_id(self) -> int:
        return self.trajectory.run_id


@dataclass(frozen=True)
class ReplayGroup:
    task: TaskInstance
    runs: tuple[RewardedTrajectory, ...]

    def __post_init__(self):
        object.__setattr__(self, "runs", tuple(self.runs))

    @property
    def rewards(self) -> list[float]:
        return [r.reward for r in self.runs]


@dataclass(frozen=True)
class GuidanceRecord:
    task_id: str
    subset_run_ids: tuple[int, ...]
    guidance: str
    reflector_model: str
    raw_response_digest: str

    def __post_init__(self):
        object.__setattr__(self, "subset_run_ids", tuple(self.subset_run_ids))


@dataclass(frozen=True)
class SftExample:
    input: str
    target: str
    origin: GuidanceRecord


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.field}: {self.rule}"


def _is_u64(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and 0 <= value <= U64_MAX


def validate_task(task: TaskInstance) -> list[Violation]:
    out = []
    if not task.task_id:
        out.append(Violation("task_id", "must be non-empty"))
    if not task.scenario_id:
        out.append(Violation("scenario_id", "must be non-empty"))
    if not task.description:
        out.append(Violation("description", "must be non-empty"))
    if task.split not in SPLITS:
        out.append(Violation("split", f"must be one of {SPLITS}"))
    for k, v in task.metadata.items():
        if not isinstance(k, str) or not isinstance(v, str):
            out.append(Violation("metadata", "keys and values must be strings"))
            break
    return out


def validate_trajectory(t: Trajectory) -> list[Violation]:
    """Return every broken Trajectory invariant. Never raises."""
    out = []
    if not t.task_id:
        out.append(Violation("task_id", "must be non-empty"))
    if not (isinstance(t.run_id, int) and t.run_id >= 0):
        out.append(Violation("run_id", "must be a non-negative integer"))
    if not _is_u64(t.seed):
        out.append(Violation("seed", "must be a 64-bit unsigned integer"))
    if t.terminated not in TERMINATIONS:
        out.append(Violation("terminated", f"must be one of {TERMINATIONS}"))
    indices = [s.index for s in t.steps]
    if any(b <= a for a, b in zip(indices, indices[1:])):
        out.append(Violation("steps", "not ordered by index"))
    else:
        seen = set(indices)
        for expected in range(max(indices, default=-1) + 1):
            if expected not in seen:
                out.append(Violation("steps", f"index gap at {expected}"))
                break
    if any(i < 0 for i in indices):
        out.append(Violation("steps", "negative index"))
    for s in t.steps:
        if not s.action:
            out.append(Violation(f"steps[{s.index}].action", "must be non-empty"))
    if t.turn_count != len(t.steps):
        out.append(Violation("turn_count", f"turn_count mismatch ({t.turn_count} != {len(t.steps)} steps)"))
    return out


def validate_rewarded(rt: RewardedTrajectory) -> list[Violation]:
    out = validate_trajectory(rt.trajectory)
    r = rt.reward
    if not isinstance(r, (int, float)) or isinstance(r, bool) or not math.isfinite(r) or not 0.0 <= r <= 1.0:
        out.append(Violation("reward", "must be a real in [0, 1]"))
    return out


def validate_group(group: ReplayGroup) -> list[Violation]:
    out = validate_task(group.task)
    if not group.runs:
        out.append(Violation("runs", "group must hold at least one run"))
    ids = [r.run_id for r in group.runs]
    if len(set(ids)) != len(ids):
        out.append(Violation("runs", "run_ids must be distinct"))
    for r in group.runs:
        if r.task_id != group.task.task_id:
            out.append(Violation("runs", f"run {r.run_id} belongs to task {r.task_id!r}"))
        out.extend(validate_rewarded(r))
    return out


def validate_guidance(rec: GuidanceRecord, group: ReplayGroup | None = None) -> list[Violation]:
    out = []
    if not rec.guidance.strip():
        out.append(Violation("guidance", "must be non-empty"))
    ids = rec.subset_run_ids
    if not ids or any(b <= a for a, b in zip(ids, ids[1:])):
        out.append(Violation("subset_run_ids", "must be non-empty and strictly increasing"))
    if group is not None:
        known = {r.run_id for r in group.runs}
        missing = [i for i in ids if i not in known]
        if missing:
            out.append(Violation("subset_run_ids", f"ids {missing} not in source group"))
    return out


def validate_sft(ex: SftExample) -> list[Violation]:
    out = []
    if not ex.input.strip():
        out.append(Violation("input", "must be non-empty"))
    if not ex.target.strip():
        out.append(Violation("target", "must be non-empty"))
    out.extend(validate_guidance(ex.origin))
    return out


# --------------------------------------------------------------------------
# record codec


@dataclass(frozen=True)
class RecordKind:
    name: str
    cls: type
    keys: tuple[str, ...]
    to_record: Callable[[Any], dict]
    from_record: Callable[[dict], Any]
    validate: Callable[[Any], list] | None = None
    identity: Callable[[Any], Any] | None = None


_KINDS: dict[str, RecordKind] = {}
_BY_CLASS: dict[type, RecordKind] = {}


def register_kind(kind: RecordKind) -> RecordKind:
    _KINDS[kind.name] = kind
    _BY_CLASS[kind.cls] = kind
    return kind


def kind_of(cls: type) -> RecordKind:
    return _BY_CLASS[cls]


def _task_to(t: TaskInstance) -> dict:
    return {
        "task_id": t.task_id,
        "scenario_id": t.scenario_id,
        "description": t.description,
        "split": t.split,
        "metadata": {k: t.metadata[k] for k in sorted(t.metadata)},
    }


def _task_from(d: dict) -> TaskInstance:
    return TaskInstance(d["task_id"], d["scenario_id"], d["description"], d["split"], dict(d["metadata"]))


def _step_to(s: StepRecord) -> dict:
    return {"index": s.index, "action": s.action, "observation": s.observation, "tool_name": s.tool_name}


def _step_from(d: dict) -> StepRecord:
    _require_keys(d, ("index", "action", "observation", "tool_name"), "step")
    return StepRecord(d["index"], d["action"], d["observation"], d["tool_name"])


def _rt_to(rt: RewardedTrajectory) -> dict:
    t = rt.trajectory
    return {
        "task_id": t.task_id,
        "run_id": t.run_id,
        "seed": t.seed,
        "reward": float(rt.reward),
        "terminated": t.terminated,
        "turn_count": t.turn_count,
        "steps": [_step_to(s) for s in t.steps],
    }


def _rt_from(d: dict) -> RewardedTrajectory:
    reward = d["reward"]
    if isinstance(reward, bool) or not isinstance(reward, (int, float)):
        raise ValueError("reward must be a number")
    traj = Trajectory(
        d["task_id"], d["run_id"], d["seed"], tuple(_step_from(s) for s in d["steps"]),
        d["terminated"], d["turn_count"],
    )
    return RewardedTrajectory(traj, float(reward))


def _guid_to(g: GuidanceRecord) -> dict:
    return {
        "task_id": g.task_id,
        "subset_run_ids": list(g.subset_run_ids),
        "guidance": g.guidance,
        "reflector_model": g.reflector_model,
        "raw_response_digest": g.raw_response_digest,
    }


def _guid_from(d: dict) -> GuidanceRecord:
    return GuidanceRecord(d["task_id"], tuple(d["subset_run_ids"]), d["guidance"],
                          d["reflector_model"], d["raw_response_digest"])


def _sft_to(ex: SftExample) -> dict:
    return {"input": ex.input, "target": ex.target, "origin": _guid_to(ex.origin)}


def _sft_from(d: dict) -> SftExample:
    _require_keys(d["origin"], GUIDANCE_KEYS, "origin")
    return SftExample(d["input"], d["target"], _guid_from(d["origin"]))


GUIDANCE_KEYS = ("task_id", "subset_run_ids", "guidance", "reflector_model", "raw_response_digest")

register_kind(RecordKind(
    "task", TaskInstance, ("task_id", "scenario_id", "description", "split", "metadata"),
    _task_to, _task_from, validate_task, identity=lambda t: t.task_id,
))
register_kind(RecordKind(
    "rewarded_trajectory", RewardedTrajectory,
    ("task_id", "run_id", "seed", "reward", "terminated", "turn_count", "steps"),
    _rt_to, _rt_from, validate_rewarded, identity=lambda r: (r.task_id, r.run_id),
))
register_kind(RecordKind("guidance", GuidanceRecord, GUIDANCE_KEYS, _guid_to, _guid_from, validate_guidance))
register_kind(RecordKind("sft_example", SftExample, ("input", "target", "origin"), _sft_to, _sft_from, validate_sft))


def _require_keys(d: Any, keys: Sequence[str], where: str) -> None:
    if not isinstance(d, dict):
        raise ValueError(f"{where} must be a JSON object")
    missing = [k for k in keys if k not in d]
    if missing:
        raise ValueError(f"missing field {missing[0]!r}")
    extra = [k for k in d if k not in keys]
    if extra:
        raise ValueError(f"unknown field {extra[0]!r}")


def dumps_line(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, allow_nan=False)


def encode_records(items: Sequence[Any]) -> bytes:
    """Encode homogeneous records to bytes. An empty sequence encodes to ``b""``."""
    if not items:
        return b""
    kind = _BY_CLASS.get(type(items[0]))
    if kind is None:
        raise TypeError(f"no record kind registered for {type(items[0]).__name__}")
    lines = [dumps_line({"format_version": FORMAT_VERSION, "kind": kind.name})]
    for item in items:
        if type(item) is not kind.cls:
            raise TypeError(f"mixed record types: {type(item).__name__} in a {kind.name} stream")
        lines.append(dumps_line(kind.to_record(item)))
    return ("\n".join(lines) + "\n").encode("utf-8")


def decode_records(data: bytes | str, expect: str | None = None) -> list[Any]:
    """Decode a record stream, raising :class:`RecordFormatError` with the line number."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    if not text:
        return []
    # only "\n" separates records; str.splitlines would also split on U+2028 and friends
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    else:
        raise RecordFormatError(len(lines), "missing trailing newline")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise RecordFormatError(1, f"bad header: {e.msg}") from None
    if not isinstance(header, dict) or set(header) != {"format_version", "kind"}:
        raise RecordFormatError(1, "header must be {format_version, kind}")
    if header["format_version"] != FORMAT_VERSION:
        raise RecordFormatError(1, f"unsupported format_version {header['format_version']!r}")
    kind = _KINDS.get(header["kind"])
    if kind is None:
        raise RecordFormatError(1, f"unknown kind {header['kind']!r}")
    if expect is not None and kind.name != expect:
        raise RecordFormatError(1, f"expected kind {expect!r}, found {kind.name!r}")
    items, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise RecordFormatError(lineno, "blank line")
        try:
            d = json.loads(line)
            _require_keys(d, kind.keys, kind.name)
            item = kind.from_record(d)
        except json.JSONDecodeError as e:
            raise RecordFormatError(lineno, f"invalid JSON: {e.msg}") from None
        except (ValueError, TypeError, KeyError) as e:
            raise RecordFormatError(lineno, str(e)) from None
        if kind.validate is not None:
            problems = kind.validate(item)
            if problems:
                raise RecordFormatError(lineno, "; ".join(map(str, problems)))
        if kind.identity is not None:
            ident = kind.identity(item)
            if ident in seen:
                raise RecordFormatError(lineno, f"duplicate record {ident!r}")
            seen.add(ident)
        items.append(item)
    return items


def write_records(path, items: Sequence[Any]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_records(items))


def read_records(path, expect: str | None = None) -> list[Any]:
    with open(path, "rb") as fh:
        return decode_records(fh.read(), expect=expect)


# --------------------------------------------------------------------------


def task_index(tasks: Iterable[TaskInstance]) -> dict[str, TaskInstance]:
    index: dict[str, TaskInstance] = {}
    for t in tasks:
        if t.task_id in index:
            raise ValueError(f"duplicate task_id {t.task_id!r}")
        index[t.task_id] = t
    return index


def group_replays(records: Iterable[RewardedTrajectory],
                  tasks: Mapping[str, TaskInstance] | Iterable[TaskInstance]) -> list[ReplayGroup]:
    """Group runs per task, in order of first appearance, runs sorted by run_id."""
    index = tasks if isinstance(tasks, Mapping) else task_index(tasks)
    buckets: dict[str, list[RewardedTrajectory]] = {}
    for rec in records:
        if rec.task_id not in index:
            raise UnknownTaskError(f"unknown task_id {rec.task_id!r}")
        buckets.setdefault(rec.task_id, []).append(rec)
    return [
        ReplayGroup(index[tid], tuple(sorted(runs, key=lambda r: r.run_id)))
        for tid, runs in buckets.items()
    ]
