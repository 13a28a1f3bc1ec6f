"""Scripted mock backends for MiniShop.

Importing this module registers:

* ``mock:minishop-shopper``  an execution agent. Without guidance it views and
  buys a random exact-title match (seeded by the episode seed). When the task
  carries guidance saying the product's description "mentions <word>", it
  views matches in ranked order and buys the first one whose description
  contains that word.
* ``mock:minishop-reflector``  a reflection agent that reads rewards through
  the inspect tool, and when it finds a fully successful run next to a worse
  one, names the word that separates the two bought items' descriptions.
  Otherwise it emits generic guidance.
"""

from __future__ import annotations

import json
import random
import re
from collections.abc import Mapping, Sequence

from .agent import GUIDANCE_HEADING, ChatMessage, register_mock
from .minishop import MiniShopWorld, solve

GENERIC_GUIDANCE = (
    "The strategy for completing this task is to search for the requested item with all of its "
    "keywords, view a matching result, and buy it."
)
CONTRAST_GUIDANCE = (
    "The strategy for completing this task is to search for the requested item, view each matching "
    "result, and buy the one whose description mentions {word}."
)

_TASK = re.compile(r"Find and buy an? (.+?) priced under \$([\d.]+)\.")
_KEYWORD = re.compile(r"mentions ([^\W_]+)")
_RESULT = re.compile(r"^\[(\w+)\] (.+?) \$([\d.]+)$", re.M)


def _history(messages: Sequence[ChatMessage]) -> list[tuple[str, str]]:
    acts = [m.content for m in messages if m.role == "assistant"]
    obs = [m.content for m in messages if m.role == "tool"]
    return list(zip(acts, obs))


def _task_text(messages: Sequence[ChatMessage]) -> str:
    for m in messages:
        if m.role == "user":
            return m.content
    return ""


def guidance_keyword(task_text: str) -> str | None:
    if GUIDANCE_HEADING not in task_text:
        return None
    guidance = task_text.split(GUIDANCE_HEADING, 1)[1].split("\n\nObservation:", 1)[0]
    m = _KEYWORD.search(guidance)
    return m.group(1).lower() if m else None


def shopper(messages: Sequence[ChatMessage], seed: int | None = None) -> str:
    text = _task_text(messages)
    m = _TASK.search(text)
    if m is None:
        return "noop"
    words = m.group(1).split()
    keyword = guidance_keyword(text)
    history = _history(messages)
    if not history:
        return "search " + " ".join(words)
    results = next((obs for act, obs in history if act.startswith("search")), "")
    listed = _RESULT.findall(results)
    candidates = [iid for iid, title, _ in listed if set(words) <= set(title.split())]
    if not candidates:
        return f"buy {listed[0][0]}" if listed else "noop"
    viewed = [act.split()[1] for act, _ in history if act.startswith("view ")]
    if keyword is None:
        pick = candidates[random.Random(seed or 0).randrange(len(candidates))]
        return f"buy {pick}" if pick in viewed else f"view {pick}"
    last_act, last_obs = history[-1]
    if last_act.startswith("view "):
        desc = next((ln for ln in last_obs.splitlines() if ln.startswith("Description:")), "")
        if keyword in re.findall(r"[^\W_]+", desc.lower()):
            return f"buy {last_act.split()[1]}"
    for iid in candidates:
        if iid not in viewed:
            return f"view {iid}"
    return f"buy {candidates[0]}"


def _bought_description(steps: list[dict]) -> str | None:
    bought = next((s["action"].split()[1] for s in steps if s["action"].startswith("buy ")), None)
    if bought is None:
        return None
    for s in steps:
        if s["action"] == f"view {bought}":
            for line in s["observation"].splitlines():
                if line.startswith("Description:"):
                    return line
    return None


def reflector(messages: Sequence[ChatMessage], seed: int | None = None) -> str:
    history = _history(messages)
    if not history:
        return 'inspect {"kind": "stat"}'
    files = re.findall(r"^(\S+): \d+ bytes", history[0][1], re.M)
    rewards = {}
    steps = {}
    for act, obs in history[1:]:
        q = json.loads(act.split(None, 1)[1])
        name, _, fld = q.get("path", "").partition("#")
        if fld == "reward":
            rewards[name] = float(obs)
        elif fld == "steps":
            steps[name] = json.loads(obs)
    for f in files:
        if f not in rewards:
            return 'inspect ' + json.dumps({"kind": "field", "path": f"{f}#reward"})
    if not files:
        return f"<guidance>{GENERIC_GUIDANCE}</guidance>"
    best = max(files, key=lambda f: rewards[f])
    worst = min(files, key=lambda f: rewards[f])
    if rewards[best] < 1.0 - 1e-9 or rewards[worst] >= rewards[best]:
        return f"<guidance>{GENERIC_GUIDANCE}</guidance>"
    for f in (best, worst):
        if f not in steps:
            return 'inspect ' + json.dumps({"kind": "field", "path": f"{f}#steps"})
    good, bad = _bought_description(steps[best]), _bought_description(steps[worst])
    if good is None or bad is None:
        return f"<guidance>{GENERIC_GUIDANCE}</guidance>"
    diff = sorted(set(re.findall(r"[^\W_]+", good.lower())) - set(re.findall(r"[^\W_]+", bad.lower())))
    if not diff:
        return f"<guidance>{GENERIC_GUIDANCE}</guidance>"
    return "Contrast found.\n<guidance>" + CONTRAST_GUIDANCE.format(word=diff[0]) + "</guidance>"


def solver_responder(worlds: Mapping[str, MiniShopWorld]):
    """Agent that replays the oracle script; ``worlds`` maps task description -> world."""
    scripts = {desc: solve(w) for desc, w in worlds.items()}
    descs = list(scripts)
    if any(a != b and b.startswith(a) for a in descs for b in descs):
        raise ValueError("task descriptions must not prefix one another")

    def respond(messages: Sequence[ChatMessage], seed: int | None = None) -> str:
        text = _task_text(messages)
        for desc, script in scripts.items():
            if text.startswith(desc):
                n = len(_history(messages))
                return script[n] if n < len(script) else "noop"
        return "noop"

    return respond


register_mock("minishop-shopper", shopper)
register_mock("minishop-reflector", reflector)
