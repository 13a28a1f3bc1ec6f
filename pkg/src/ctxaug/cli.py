"""``ctxaug`` command line: collect, reflect, export-sft, train, infer, eval, compare, inspect, check."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from . import mocks  # noqa: F401  registers the built-in mock backends
from .agent import compose_context, load_prompt
from .cam import (
    CAM_KINDS,
    CamBackend,
    TemplatePolicy,
    build_vector_store,
    generate,
    harvest_templates,
    write_template_library,
)
from .config import PipelineConfig, dump_config, load_config
from .errors import CtxAugError
from .evaluation import compare, evaluate
from .grpo import finite_diff_check, group_advantages, load_checkpoint, random_problem, save_checkpoint, train
from .hashing import stable_hash
from .minishop import MiniShop, make_minishop_task
from .orchestrator import ARCHIVE_NAME, collect_replays
from .records import (
    TaskInstance,
    decode_records,
    encode_records,
    group_replays,
    read_records,
    task_index,
    write_records,
)
from .reflection import (
    INSPECT_KINDS,
    InspectionQuery,
    build_sft_dataset,
    enumerate_subsets,
    inspect,
    split_dataset,
    write_chat_jsonl,
)

log = logging.getLogger("ctxaug")

GUIDANCE_FILE = "guidance.guid.ndrec"
CHECKPOINT_FILE = "policy.ckpt.ndrec"
LIBRARY_FILE = "templates.txt"
SYSTEM_PROMPT = "minishop_system.txt"


# --------------------------------------------------------------------------
# shared helpers


def load_tasks(cfg: PipelineConfig) -> list[TaskInstance]:
    """Tasks from ``paths.tasks``, or generated MiniShop tasks with a by-seed train/test split."""
    if cfg.paths.tasks is not None:
        return read_records(cfg.paths.tasks, expect="task")
    n = cfg.env.task_count
    n_train = min(max(round(cfg.split.ratio * n), 1), n - 1)
    first = cfg.env.first_task_seed
    return [make_minishop_task(first + i, cfg.env.difficulty, "train" if i < n_train else "test")[0]
            for i in range(n)]


def _out(args: argparse.Namespace, default: str) -> Path:
    p = Path(args.out or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _require(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise CtxAugError(f"{path} not found ({hint})")
    return path


def _guidance_records(cfg: PipelineConfig):
    return read_records(_require(Path(cfg.paths.datasets) / GUIDANCE_FILE, "run `reflect` first"),
                        expect="guidance")


def build_cam(cfg: PipelineConfig, kind: str) -> CamBackend:
    if kind == "none":
        return CamBackend()
    if kind == "endpoint":
        return CamBackend("endpoint", endpoint=cfg.backends.cam.profile("cam"))
    if kind == "retrieval":
        store = build_vector_store(_guidance_records(cfg), task_index(load_tasks(cfg)), cfg.embedding.build(),
                                   collapse=cfg.cam.collapse_store)
        return CamBackend("retrieval", store=store, embedding=cfg.embedding.build())
    ckpt = _require(Path(cfg.paths.checkpoints) / CHECKPOINT_FILE, "run `train` first")
    return CamBackend("template_policy", policy=load_checkpoint(ckpt))


def _groups(cfg: PipelineConfig):
    archive = _require(Path(cfg.paths.archives) / ARCHIVE_NAME, "run `collect` first")
    return group_replays(read_records(archive, expect="rewarded_trajectory"), task_index(load_tasks(cfg)))


def _reflect(cfg: PipelineConfig):
    examples, report = build_sft_dataset(_groups(cfg), cfg.reflection.k, cfg.backends.reflector.profile("reflector"),
                                         cap=cfg.reflection.cap, concurrency=cfg.concurrency)
    for task_id, run_ids, reason in report.skipped:
        print(f"skipped {task_id} runs {list(run_ids)}: {reason}", file=sys.stderr)
    return examples, report


# --------------------------------------------------------------------------
# subcommands


def cmd_collect(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    tasks = [t for t in load_tasks(cfg) if t.split == "train"]
    out = _out(args, cfg.paths.archives)
    groups = collect_replays(tasks, cfg.reflection.m, cfg.concurrency, cfg.backends.exec.profile("exec"), MiniShop,
                             load_prompt(SYSTEM_PROMPT), cfg.seed, cfg.env.spec(), out_dir=out)
    n = sum(len(g.runs) for g in groups)
    mean = float(np.mean([r for g in groups for r in g.rewards]))
    print(f"collected {n} trajectories for {len(groups)} tasks (m={cfg.reflection.m}), "
          f"mean reward {mean:.4f} -> {out / ARCHIVE_NAME}")
    return 0


def cmd_reflect(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    examples, report = _reflect(cfg)
    out = _out(args, cfg.paths.datasets)
    write_records(out / GUIDANCE_FILE, [ex.origin for ex in examples])
    print(f"{len(examples)} guidance records ({len(report.skipped)} of {report.attempted} reflections skipped) "
          f"-> {out / GUIDANCE_FILE}")
    return 0


def cmd_export_sft(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    examples, report = _reflect(cfg)
    out = _out(args, cfg.paths.datasets)
    write_records(out / GUIDANCE_FILE, [ex.origin for ex in examples])
    train_set, val_set = split_dataset(examples, cfg.split.ratio, cfg.split.seed)
    for name, part in (("train", train_set), ("val", val_set)):
        write_records(out / f"sft_{name}.sft.ndrec", part)
        write_chat_jsonl(part, out / f"sft_{name}.chat.jsonl")
    print(f"dataset of {len(examples)} examples (train {len(train_set)}, val {len(val_set)}; "
          f"{len(report.skipped)} skipped) -> {out}")
    return 0


def cmd_train(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    templates = harvest_templates(_guidance_records(cfg), cfg.cam.library_size)
    if len(templates) < 2:
        raise CtxAugError(f"template library has {len(templates)} distinct guidance texts; training needs at least 2")
    tasks = [t for t in load_tasks(cfg) if t.split == "train"]
    policy, history = train(TemplatePolicy.uniform(templates), tasks, MiniShop, cfg.backends.exec.profile("exec"),
                            load_prompt(SYSTEM_PROMPT), cfg.train.build(cfg.seed), cfg.env.spec(),
                            concurrency=cfg.concurrency)
    out = _out(args, cfg.paths.checkpoints)
    write_template_library(templates, out / LIBRARY_FILE)
    save_checkpoint(policy, out / CHECKPOINT_FILE)
    write_records(out / "history.hist.ndrec", history)
    last = history[-1] if history else None
    summary = f"mean reward {last.mean_reward:.4f}, kl {last.mean_kl:.5f}" if last else "no epochs"
    print(f"trained {len(templates)} templates for {len(history)} epochs ({summary}) -> {out / CHECKPOINT_FILE}")
    return 0


def cmd_infer(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    kind = args.kind or cfg.cam.kind
    if args.task_id:
        tasks = task_index(load_tasks(cfg))
        if args.task_id not in tasks:
            raise CtxAugError(f"unknown task_id {args.task_id!r}")
        q = tasks[args.task_id]
    else:
        q = TaskInstance("cli", "cli", args.task)
    gen = generate(build_cam(cfg, kind), q, np.random.default_rng(stable_hash(cfg.seed, "infer", q.task_id)))
    print(compose_context(q, gen.guidance).composed)
    return 0


def eval_seeds(cfg: PipelineConfig) -> list[int]:
    if cfg.eval.seeds is not None:
        return list(cfg.eval.seeds)
    return [stable_hash(cfg.seed, "eval", r) for r in range(cfg.eval.runs)]


def cmd_eval(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    kind = args.kind or cfg.cam.kind
    label = args.label or kind
    tasks = [t for t in load_tasks(cfg) if cfg.eval.split == "all" or t.split == cfg.eval.split]
    if not tasks:
        raise CtxAugError(f"no tasks in split {cfg.eval.split!r}")
    report = evaluate(build_cam(cfg, kind), tasks, cfg.eval.runs, MiniShop, cfg.backends.exec.profile("exec"),
                      load_prompt(SYSTEM_PROMPT), eval_seeds(cfg), cfg.env.spec(), label=label, cam_seed=cfg.seed,
                      pass_ks=cfg.eval.pass_k, concurrency=cfg.concurrency)
    out = _out(args, cfg.paths.reports)
    write_records(out / f"{label}.eval.ndrec", [report])
    table, _ = compare([report], cfg.eval.threshold)
    print(table)
    print(f"-> {out / f'{label}.eval.ndrec'}")
    return 0


def cmd_compare(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    reports = [r for path in args.reports for r in read_records(path, expect="eval_report")]
    table, summaries = compare(reports, cfg.eval.threshold)
    out = _out(args, cfg.paths.reports)
    write_records(out / "summary.sum.ndrec", summaries)
    print(table)
    return 0


def cmd_inspect(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    print(inspect(args.archive, InspectionQuery(args.kind, args.pattern, args.limit, args.path)))
    return 0


def cmd_check(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    """Gradient check on random problems plus a quick invariant smoke suite."""
    rng = np.random.default_rng(cfg.seed)
    train_cfg = cfg.train.build(cfg.seed)
    worst = 0.0
    for _ in range(args.instances):
        policy, samples = random_problem(rng, train_cfg)
        worst = max(worst, finite_diff_check(policy, samples, train_cfg, n_coords=50, rng=rng))
    results = [(f"gradient max relative error {worst:.2e} over {args.instances} problems", worst < 1e-4)]

    same = group_advantages([0.5] * train_cfg.group_size, train_cfg.advantage_epsilon)
    results.append(("identical rewards give zero advantages", bool(np.all(same == 0.0))))
    adv = group_advantages(rng.random(train_cfg.group_size), train_cfg.advantage_epsilon)
    results.append(("advantages have zero mean", abs(float(adv.mean())) <= 1e-12))

    subsets_ok = all(
        list(enumerate_subsets(m, k).subsets)
        == sorted(tuple(i for i in range(m) if mask >> i & 1) for mask in range(1 << m) if bin(mask).count("1") == k)
        for m in range(1, 11) for k in range(1, m + 1)
    )
    results.append(("subset enumeration matches bitmask enumeration", subsets_ok))

    tasks = load_tasks(cfg)
    results.append(("task records round-trip", decode_records(encode_records(tasks)) == tasks))
    for label, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {label}")
    return 0 if all(ok for _, ok in results) else 1


# --------------------------------------------------------------------------
# argument parsing


COMMANDS = {
    "collect": (cmd_collect, "run the execution agent m times per training task"),
    "reflect": (cmd_reflect, "reflect over every k-subset of each replay group"),
    "export-sft": (cmd_export_sft, "reflect, split by task and write the SFT datasets"),
    "train": (cmd_train, "harvest a template library and train the template policy"),
    "infer": (cmd_infer, "print a task description with its generated guidance"),
    "eval": (cmd_eval, "evaluate one CAM method and write its report"),
    "compare": (cmd_compare, "tabulate evaluation reports side by side"),
    "inspect": (cmd_inspect, "query a trajectory archive folder"),
    "check": (cmd_check, "gradient check and invariant smoke suite"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML pipeline configuration (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the top-level seed")
    common.add_argument("--concurrency", type=int, help="override the worker count")
    common.add_argument("--out", help="output directory for this command")
    common.add_argument("--quiet", action="store_true", help="only log warnings")

    parser = argparse.ArgumentParser(prog="ctxaug", description="Context augmentation pipeline for LLM agents.")
    parser.add_argument("--print-defaults", action="store_true", help="print the default configuration and exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    subs = {name: sub.add_parser(name, parents=[common], help=text, description=text)
            for name, (_, text) in COMMANDS.items()}

    for name in ("infer", "eval"):
        subs[name].add_argument("--kind", choices=CAM_KINDS, help="CAM method (default: cam.kind)")
    task = subs["infer"].add_mutually_exclusive_group(required=True)
    task.add_argument("--task", help="task description text")
    task.add_argument("--task-id", help="id of a configured task")
    subs["eval"].add_argument("--label", help="method label in the report (default: the kind)")
    subs["compare"].add_argument("reports", nargs="+", help="evaluation report files")
    subs["inspect"].add_argument("archive", help="folder of trajectory files")
    subs["inspect"].add_argument("--kind", choices=INSPECT_KINDS, default="stat")
    subs["inspect"].add_argument("--pattern", help="regular expression for search")
    subs["inspect"].add_argument("--limit", type=int, default=20)
    subs["inspect"].add_argument("--path", help="file or file#dotted.path")
    subs["check"].add_argument("--instances", type=int, default=20, help="random gradient-check problems")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    """Exit 0 on success, 1 on a domain error, 2 on a usage error."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.print_defaults:
        print(dump_config(PipelineConfig()), end="")
        return 0
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise CtxAugError("--seed must be >= 0")
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.concurrency is not None:
            if args.concurrency < 1:
                raise CtxAugError("--concurrency must be >= 1")
            cfg = dataclasses.replace(cfg, concurrency=args.concurrency)
        return COMMANDS[args.command][0](cfg, args)
    except (CtxAugError, ValueError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
