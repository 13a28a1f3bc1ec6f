"""Watch one reflection: the mock reflector inspects three runs of a task and contrasts them.

Every tool call and its (truncated) output is printed. Run with
``python3 demos/reflection_trace.py``.
"""

from __future__ import annotations

from ctxaug import BackendProfile, MiniShop, collect_replays, make_minishop_task, reflect
from ctxaug.agent import load_prompt, register_mock
from ctxaug.mocks import reflector


def traced(messages, seed=None):
    if messages[-1].role == "tool":
        out = messages[-1].content
        print("  <- " + (out if len(out) < 300 else out[:300] + " ...").replace("\n", "\n     "))
    reply = reflector(messages, seed)
    print("  -> " + reply.replace("\n", "\n     "))
    return reply


def main() -> None:
    register_mock("traced-reflector", traced)
    task, _ = make_minishop_task(3, "hard")
    prompt = load_prompt("minishop_system.txt")
    (group,) = collect_replays([task], 6, 1, BackendProfile("mock:minishop-shopper"), MiniShop, prompt, 0)
    print(f"task: {task.description}")
    print("run rewards: " + ", ".join(f"{rt.run_id}={rt.reward:.3f}" for rt in group.runs))

    best = max(range(6), key=lambda i: group.runs[i].reward)
    worst = min(range(6), key=lambda i: group.runs[i].reward)
    subset = sorted({best, worst, next(i for i in range(6) if i not in (best, worst))})
    print(f"\nreflecting over runs {subset}:")
    record = reflect(group, subset, BackendProfile("mock:traced-reflector"))
    print(f"\nguidance record for runs {list(record.subset_run_ids)}:\n  {record.guidance}")


if __name__ == "__main__":
    main()
