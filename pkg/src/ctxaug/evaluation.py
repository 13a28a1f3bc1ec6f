"""Head-to-head evaluation: average reward, TGC, SGC, pass@k, turns and CAM latency."""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .agent import BackendProfile, compose_context, run_episode
from .cam import CamBackend, TemplatePolicy, features, generate
from .errors import CtxAugError
from .hashing import stable_hash
from .minishop import Environment, EnvSpec
from .orchestrator import run_ordered
from .records import RecordKind, TaskInstance, register_kind

COMPLETION_THRESHOLD = 1.0 - 1e-9


@dataclass
class EvalReport:
    """Raw per-task, per-run results. Every metric is recomputed from these."""

    method: str
    task_ids: list[str]
    scenarios: dict[str, str]
    rewards: dict[str, list[float]]
    turns: dict[str, list[int]]
    errors: dict[str, list[bool]]
    seeds: list[int]
    latencies: list[float] | None = None
    pass_ks: list[int] = field(default_factory=lambda: [3])

    @property
    def runs(self) -> int:
        return len(self.seeds)

    def matrix(self) -> np.ndarray:
        """Rewards as a (tasks, runs) array in ``task_ids`` order."""
        return np.array([self.rewards[t] for t in self.task_ids], dtype=float).reshape(len(self.task_ids), -1)


def _report_to(r: EvalReport) -> dict:
    return {
        "method": r.method,
        "seeds": list(r.seeds),
        "pass_ks": list(r.pass_ks),
        "tasks": [{"task_id": t, "scenario_id": r.scenarios[t], "rewards": r.rewards[t],
                   "turns": r.turns[t], "errors": r.errors[t]} for t in r.task_ids],
        "latencies": r.latencies,
    }


def _report_from(d: dict) -> EvalReport:
    tasks = d["tasks"]
    return EvalReport(
        d["method"], [t["task_id"] for t in tasks], {t["task_id"]: t["scenario_id"] for t in tasks},
        {t["task_id"]: [float(x) for x in t["rewards"]] for t in tasks},
        {t["task_id"]: list(t["turns"]) for t in tasks}, {t["task_id"]: list(t["errors"]) for t in tasks},
        list(d["seeds"]), None if d["latencies"] is None else [float(x) for x in d["latencies"]],
        list(d["pass_ks"]),
    )


def _report_problems(r: EvalReport) -> list[str]:
    bad = [t for t in r.task_ids if len(r.rewards[t]) != r.runs]
    return [f"tasks {bad} do not have {r.runs} runs"] if bad else []


register_kind(RecordKind("eval_report", EvalReport, ("method", "seeds", "pass_ks", "tasks", "latencies"),
                         _report_to, _report_from, _report_problems))


# --------------------------------------------------------------------------
# metrics


def _completed(report: EvalReport, threshold: float) -> np.ndarray:
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    return report.matrix() >= threshold


def tgc_per_run(report: EvalReport, threshold: float = COMPLETION_THRESHOLD) -> np.ndarray:
    return _completed(report, threshold).mean(axis=0)


def tgc(report: EvalReport, threshold: float = COMPLETION_THRESHOLD) -> float:
    """Task goal completion: mean over runs of the fraction of tasks completed."""
    return float(tgc_per_run(report, threshold).mean())


def sgc_per_run(report: EvalReport, scenario_map: Mapping[str, str] | None = None,
                threshold: float = COMPLETION_THRESHOLD) -> np.ndarray:
    scenario_map = report.scenarios if scenario_map is None else scenario_map
    missing = [t for t in report.task_ids if t not in scenario_map]
    if missing:
        raise CtxAugError(f"unknown scenario for tasks {missing}")
    done = _completed(report, threshold)
    scenarios = sorted(set(scenario_map[t] for t in report.task_ids))
    rows = {s: [i for i, t in enumerate(report.task_ids) if scenario_map[t] == s] for s in scenarios}
    per_scenario = np.array([done[rows[s]].all(axis=0) for s in scenarios])
    return per_scenario.mean(axis=0)


def sgc(report: EvalReport, scenario_map: Mapping[str, str] | None = None,
        threshold: float = COMPLETION_THRESHOLD) -> float:
    """Scenario goal completion: mean over runs of the fraction of scenarios with every task completed."""
    return float(sgc_per_run(report, scenario_map, threshold).mean())


def pass_at_k(rewards: Sequence[Sequence[float]] | Mapping[str, Sequence[float]], k: int,
              threshold: float = COMPLETION_THRESHOLD) -> float:
    """Fraction of tasks completed in at least one of their first ``k`` runs."""
    rows = list(rewards.values()) if isinstance(rewards, Mapping) else list(rewards)
    if not rows:
        return 0.0
    runs = min(len(r) for r in rows)
    if not 1 <= k <= runs:
        raise ValueError(f"k={k} must be between 1 and the run count {runs}")
    m = np.array([list(r)[:k] for r in rows], dtype=float)
    return float((m >= threshold).any(axis=1).mean())


def metrics(report: EvalReport, threshold: float = COMPLETION_THRESHOLD) -> dict:
    m = report.matrix()
    per_run_reward = m.mean(axis=0)
    t_runs = tgc_per_run(report, threshold)
    s_runs = sgc_per_run(report, threshold=threshold)
    turns = [x for t in report.task_ids for x in report.turns[t]]
    out = {
        "method": report.method,
        "avg_reward": float(per_run_reward.mean()),
        "avg_reward_std": float(per_run_reward.std()),
        "tgc": float(t_runs.mean()),
        "tgc_std": float(t_runs.std()),
        "sgc": float(s_runs.mean()),
        "sgc_std": float(s_runs.std()),
        "pass_at_k": {str(k): pass_at_k(report.rewards, k, threshold) for k in report.pass_ks if k <= report.runs},
        "mean_turns": float(np.mean(turns)) if turns else 0.0,
        "mean_cam_latency": float(np.mean(report.latencies)) if report.latencies else None,
        "errors": int(sum(sum(report.errors[t]) for t in report.task_ids)),
    }
    return out


# --------------------------------------------------------------------------
# running


def evaluate(method: CamBackend, tasks: Sequence[TaskInstance], runs: int, env_factory: Callable[[], Environment],
             exec_backend: BackendProfile, system_prompt: str, seeds: Sequence[int],
             spec: EnvSpec = EnvSpec(), label: str | None = None, cam_seed: int = 0,
             pass_ks: Sequence[int] = (3,), concurrency: int = 1) -> EvalReport:
    """Run every task once per run; run ``r`` uses episode seed ``seeds[r]`` for all methods."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if len(seeds) != runs:
        raise ValueError(f"need {runs} seeds, got {len(seeds)}")
    units = [(r, t) for r in range(runs) for t in tasks]

    def work(unit):
        r, task = unit
        rng = np.random.default_rng(stable_hash(cam_seed, r, task.task_id))
        try:
            gen = generate(method, task, rng)
        except CtxAugError as e:
            return 0.0, 0, True, None, str(e)
        rt = run_episode(env_factory(), compose_context(task, gen.guidance), exec_backend, system_prompt,
                         spec, seed=seeds[r], run_id=r)
        return rt.reward, rt.trajectory.turn_count, False, gen.latency, None

    results = run_ordered(work, units, concurrency)
    ids = [t.task_id for t in tasks]
    report = EvalReport(
        label or method.kind, ids, {t.task_id: t.scenario_id for t in tasks},
        {i: [] for i in ids}, {i: [] for i in ids}, {i: [] for i in ids}, list(seeds),
        None if method.kind == "none" else [], list(pass_ks),
    )
    for (_, task), (reward, turns, err, latency, _) in zip(units, results):
        report.rewards[task.task_id].append(reward)
        report.turns[task.task_id].append(turns)
        report.errors[task.task_id].append(err)
        if report.latencies is not None and latency is not None:
            report.latencies.append(latency)
    return report


@dataclass(frozen=True)
class MethodSummary:
    method: str
    avg_reward: float
    avg_reward_std: float
    tgc: float
    tgc_std: float
    sgc: float
    sgc_std: float
    pass_at_k: dict
    mean_turns: float
    mean_cam_latency: float | None
    errors: int


register_kind(RecordKind(
    "eval_summary", MethodSummary,
    ("method", "avg_reward", "avg_reward_std", "tgc", "tgc_std", "sgc", "sgc_std", "pass_at_k",
     "mean_turns", "mean_cam_latency", "errors"),
    lambda s: dict(s.__dict__),
    lambda d: MethodSummary(**d),
))


def compare(reports: Sequence[EvalReport],
            threshold: float = COMPLETION_THRESHOLD) -> tuple[str, list[MethodSummary]]:
    """Render one row per method as ``mean (std)`` and return the machine-readable rows."""
    if not reports:
        raise ValueError("nothing to compare")
    base = set(reports[0].task_ids)
    for r in reports[1:]:
        other = set(r.task_ids)
        if other != base:
            raise CtxAugError(f"task sets differ between {reports[0].method!r} and {r.method!r}: "
                              f"{sorted(base ^ other)}")
        if r.runs != reports[0].runs:
            raise CtxAugError(f"run counts differ: {reports[0].runs} vs {r.runs}")
    summaries = [MethodSummary(**metrics(r, threshold)) for r in reports]
    ks = sorted({k for s in summaries for k in s.pass_at_k})
    header = ["Method", "Avg. Reward", "TGC", "SGC"] + [f"Pass@{k}" for k in ks] + ["Turns", "CAM latency (s)"]
    rows = []
    for s in summaries:
        rows.append([
            s.method,
            f"{s.avg_reward:.4f} ({s.avg_reward_std:.4f})",
            f"{100 * s.tgc:.2f} ({100 * s.tgc_std:.2f})",
            f"{100 * s.sgc:.2f} ({100 * s.sgc_std:.2f})",
            *[f"{100 * s.pass_at_k[k]:.2f}" if k in s.pass_at_k else "NA" for k in ks],
            f"{s.mean_turns:.1f}",
            "NA" if s.mean_cam_latency is None else f"{s.mean_cam_latency:.4f}",
        ])
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
    return "\n".join(lines), summaries


# --------------------------------------------------------------------------
# exhaustive oracle


def guidance_reward_table(tasks: Sequence[TaskInstance], guidances: Sequence[str | None],
                          env_factory: Callable[[], Environment], exec_backend: BackendProfile,
                          system_prompt: str, seeds: Sequence[int], spec: EnvSpec = EnvSpec(),
                          concurrency: int = 1) -> np.ndarray:
    """Mean reward of every (task, guidance) pair over ``seeds``; shape (tasks, guidances).

    ``None`` stands for no guidance (the baseline).
    """
    units = [(ti, gi, s) for ti in range(len(tasks)) for gi in range(len(guidances)) for s in seeds]

    def work(u):
        ti, gi, s = u
        task = tasks[ti]
        return run_episode(env_factory(), compose_context(task, guidances[gi]), exec_backend,
                           system_prompt, spec, seed=s).reward

    flat = np.array(run_ordered(work, units, concurrency), dtype=float)
    return flat.reshape(len(tasks), len(guidances), len(seeds)).mean(axis=2)


def expected_policy_reward(policy: TemplatePolicy, tasks: Sequence[TaskInstance], table: np.ndarray) -> float:
    """Exact expected reward of ``policy`` given a (tasks, templates) reward table."""
    probs = np.array([policy.probs(features(t, policy.feature_dim - 1)) for t in tasks])
    return float(np.mean(np.sum(probs * table, axis=1)))
