"""Walk through one hard MiniShop task: the hidden requirement, a plain run and a guided run.

Run with ``python3 demos/minishop_walkthrough.py``.
"""

from __future__ import annotations

from ctxaug import BackendProfile, EnvSpec, MiniShop, compose_context, make_minishop_task, run_episode
from ctxaug.agent import load_prompt
from ctxaug.minishop import HIDDEN_ATTRIBUTES
from ctxaug.mocks import CONTRAST_GUIDANCE


def show(title: str, rt) -> None:
    print(f"--- {title}: reward {rt.reward:.3f} in {rt.trajectory.turn_count} turns")
    for step in rt.trajectory.steps:
        print(f"> {step.action}")
        print("  " + step.observation.replace("\n", "\n  "))


def main() -> None:
    task, world = make_minishop_task(3, "hard")
    hidden = sorted(world.target_attributes & set(HIDDEN_ATTRIBUTES))
    print(f"task: {task.description}")
    print(f"the title never mentions {hidden}; only item descriptions do\n")

    shopper = BackendProfile("mock:minishop-shopper")
    prompt = load_prompt("minishop_system.txt")
    spec = EnvSpec()

    plain = run_episode(MiniShop(), compose_context(task, None), shopper, prompt, spec, seed=1)
    show("no guidance", plain)

    guidance = CONTRAST_GUIDANCE.format(word=hidden[0])
    augmented = compose_context(task, guidance)
    print("\n--- augmented task text\n" + augmented.composed)
    guided = run_episode(MiniShop(), augmented, shopper, prompt, spec, seed=1)
    show("with guidance", guided)


if __name__ == "__main__":
    main()
