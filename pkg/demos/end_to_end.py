"""The whole pipeline in one process on MiniShop, with mock backends throughout.

1. collect m=6 runs per training task with the guidance-following mock shopper
2. reflect over every 3-of-6 subset with the contrastive mock reflector
3. harvest a template library and train the template policy with GRPO
4. evaluate no guidance, retrieval and the trained policy on held-out tasks

Run with ``python3 demos/end_to_end.py [epochs]``. Takes a few seconds.
"""

from __future__ import annotations

import sys
import time

from ctxaug import (
    BackendProfile,
    CamBackend,
    MiniShop,
    TemplatePolicy,
    TrainConfig,
    build_sft_dataset,
    collect_replays,
    compare,
    evaluate,
    make_minishop_task,
    train,
)
from ctxaug.agent import load_prompt
from ctxaug.cam import build_vector_store, harvest_templates
from ctxaug.evaluation import expected_policy_reward, guidance_reward_table
from ctxaug.records import task_index


def main(epochs: int = 50) -> None:
    t0 = time.perf_counter()
    shopper = BackendProfile("mock:minishop-shopper")
    reflector = BackendProfile("mock:minishop-reflector")
    prompt = load_prompt("minishop_system.txt")
    train_tasks = [make_minishop_task(s, "hard", "train")[0] for s in range(20)]
    test_tasks = [make_minishop_task(s, "hard", "test")[0] for s in range(100, 108)]

    groups = collect_replays(train_tasks, 6, 8, shopper, MiniShop, prompt, base_seed=0)
    rewards = [r for g in groups for r in g.rewards]
    print(f"collected {len(rewards)} runs, mean reward {sum(rewards) / len(rewards):.4f}")

    examples, skipped = build_sft_dataset(groups, 3, reflector, concurrency=8)
    library = harvest_templates([e.origin for e in examples], 8)
    print(f"{len(examples)} SFT examples ({len(skipped.skipped)} skipped), library of {len(library)}:")
    for t in library:
        print(f"  - {t}")

    table = guidance_reward_table(train_tasks, library, MiniShop, shopper, prompt, seeds=range(8), concurrency=8)
    curve = []
    policy, _ = train(TemplatePolicy.uniform(library), train_tasks, MiniShop, shopper, prompt,
                      TrainConfig(epochs=epochs), concurrency=8,
                      on_epoch=lambda s, p: curve.append(expected_policy_reward(p, train_tasks, table)))
    marks = [e for e in (1, 5, 10, 25, 50, 100, 200) if e <= epochs]
    print("expected training reward by epoch: " + ", ".join(f"{e}: {curve[e - 1]:.3f}" for e in marks))

    store = build_vector_store([e.origin for e in examples], task_index(train_tasks))
    methods = {
        "none": CamBackend(),
        "retrieval": CamBackend("retrieval", store=store),
        "template_policy": CamBackend("template_policy", policy=policy),
    }
    seeds = [11, 12, 13]
    reports = [evaluate(cam, test_tasks, 3, MiniShop, shopper, prompt, seeds, label=name, concurrency=8)
               for name, cam in methods.items()]
    table_text, _ = compare(reports)
    print(f"\nheld-out tasks ({len(test_tasks)}), 3 runs each:\n{table_text}")
    print(f"\ndone in {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 50)
