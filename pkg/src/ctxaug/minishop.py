"""MiniShop: a small deterministic text shopping environment.

The environment contract is three calls over plain values:

* ``reset(spec, task, seed) -> (EnvState, observation)``
* ``step(state, action) -> (EnvState, observation, terminal)``
* ``score(task_or_world, trajectory) -> reward in [0, 1]``

Any other benchmark can be plugged into the agent runtime by implementing
the same three methods (see :class:`Environment`).

Actions understood by MiniShop::

    search <words>     top-10 titles by word overlap, ties by item_id
    view <item_id>     title, price, listed attributes and description
    buy <item_id>      purchase, ends the episode

Anything else is answered with ``invalid action`` and still costs a turn.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field, replace
from typing import Protocol

from .errors import ContractViolation, EnvError
from .records import TaskInstance, Trajectory

CATEGORIES = ("shirt", "shoes", "backpack", "jacket")
COLORS = ("red", "blue", "green", "black", "white", "grey")
MATERIALS = ("cotton", "wool", "leather", "canvas", "denim", "nylon")
# Each category has one property that only shows up in item descriptions.
HIDDEN_BY_CATEGORY = {
    "shirt": "organic",
    "shoes": "waterproof",
    "backpack": "handmade",
    "jacket": "recycled",
}
HIDDEN_ATTRIBUTES = tuple(HIDDEN_BY_CATEGORY.values())
DIFFICULTIES = ("easy", "hard")

MAX_SEARCH_RESULTS = 10
INVALID_ACTION = "invalid action"


@dataclass(frozen=True)
class EnvSpec:
    env_name: str = "minishop"
    gamma: float = 1.0
    max_turns: int = 30
    action_grammar: tuple[str, ...] = ("search <words>", "view <item_id>", "buy <item_id>")

    def __post_init__(self):
        if not isinstance(self.max_turns, int) or self.max_turns < 1:
            raise ValueError(f"max_turns must be >= 1, got {self.max_turns!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma!r}")


@dataclass(frozen=True)
class Item:
    item_id: str
    title: tuple[str, ...]
    attributes: frozenset[str]
    price: float
    description: str

    @property
    def title_text(self) -> str:
        return " ".join(self.title)


@dataclass(frozen=True)
class MiniShopWorld:
    catalog: tuple[Item, ...]
    target_attributes: frozenset[str]
    price_ceiling: float
    difficulty: str
    world_seed: int

    def item(self, item_id: str) -> Item | None:
        for it in self.catalog:
            if it.item_id == item_id:
                return it
        return None

    @property
    def attribute_vocabulary(self) -> frozenset[str]:
        return frozenset().union(*(it.attributes for it in self.catalog))


@dataclass(frozen=True)
class EnvState:
    world: MiniShopWorld = field(repr=False)
    spec: EnvSpec
    rng_seed: int
    turn: int = 0
    terminal: bool = False
    listing: tuple[str, ...] = ()
    agent_finished: bool = False


class Environment(Protocol):
    def reset(self, spec: EnvSpec, task: TaskInstance, seed: int) -> tuple[EnvState, str]: ...

    def step(self, state: EnvState, action: str) -> tuple[EnvState, str, bool]: ...

    def score(self, task: TaskInstance, trajectory: Trajectory) -> float: ...


# --------------------------------------------------------------------------
# generation


def _price(rng: random.Random, lo: float, hi: float) -> float:
    return round(rng.uniform(lo, hi), 2)


def _description(color: str, material: str, category: str, note: str) -> str:
    return f"A {color} {material} {category}. Notes: {note}."


def make_world(world_seed: int, difficulty: str) -> MiniShopWorld:
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}")
    rng = random.Random(f"minishop:{world_seed}:{difficulty}")
    category = rng.choice(CATEGORIES)
    color = rng.choice(COLORS)
    material = rng.choice(MATERIALS)
    ceiling = float(rng.choice((40, 60, 80, 100)))
    hidden = HIDDEN_BY_CATEGORY[category] if difficulty == "hard" else None

    specs = []  # (title words, attributes, price, note)
    visible = (color, material, category)
    target_attrs = set(visible) | ({hidden} if hidden else set())

    # Exact visible matches: one full target plus decoys.
    if hidden:
        specs.append((visible, set(visible) | {hidden}, _price(rng, 0.5 * ceiling, 0.95 * ceiling), hidden))
        decoy_notes = [h for h in HIDDEN_ATTRIBUTES if h != hidden] + ["standard", "standard"]
        rng.shuffle(decoy_notes)
        for j, note in enumerate(decoy_notes):
            over = j < 2
            price = _price(rng, 1.1 * ceiling, 1.6 * ceiling) if over else _price(rng, 0.5 * ceiling, 0.95 * ceiling)
            attrs = set(visible) | ({note} if note != "standard" else set())
            specs.append((visible, attrs, price, note))
    else:
        specs.append((visible, set(visible), _price(rng, 0.5 * ceiling, 0.95 * ceiling), "standard"))
        specs.append((visible, set(visible), _price(rng, 0.5 * ceiling, 0.95 * ceiling), "standard"))
        specs.append((visible, set(visible), _price(rng, 1.1 * ceiling, 1.6 * ceiling), "standard"))

    # Distractors sharing some but not all visible words.
    for _ in range(12):
        c = rng.choice([x for x in COLORS if x != color] + [color])
        m = rng.choice([x for x in MATERIALS if x != material])
        cat = rng.choice(CATEGORIES)
        if (c, m, cat) == visible:
            continue
        note = rng.choice(HIDDEN_ATTRIBUTES + ("standard",))
        attrs = {c, m, cat} | ({note} if note != "standard" else set())
        specs.append(((c, m, cat), attrs, _price(rng, 0.3 * ceiling, 1.5 * ceiling), note))

    order = list(range(len(specs)))
    rng.shuffle(order)
    catalog = []
    for n, j in enumerate(order):
        words, attrs, price, note = specs[j]
        c, m, cat = words
        catalog.append(Item(f"i{n:03d}", tuple(words), frozenset(attrs), price, _description(c, m, cat, note)))
    return MiniShopWorld(tuple(catalog), frozenset(target_attrs), ceiling, difficulty, world_seed)


def _target_visible(world: MiniShopWorld) -> tuple[str, str, str]:
    full = [it for it in world.catalog if world.target_attributes <= it.attributes]
    return full[0].title  # type: ignore[return-value]


def describe_task(world: MiniShopWorld) -> str:
    color, material, category = _target_visible(world)
    return f"Find and buy a {color} {material} {category} priced under ${world.price_ceiling:.2f}."


def make_minishop_task(seed: int, difficulty: str = "easy", split: str = "train") -> tuple[TaskInstance, MiniShopWorld]:
    world = make_world(seed, difficulty)
    category = _target_visible(world)[2]
    task = TaskInstance(
        task_id=f"minishop-{difficulty}-{seed:05d}",
        scenario_id=f"{difficulty}-{category}",
        description=describe_task(world),
        split=split,
        metadata={"env": "minishop", "world_seed": str(seed), "difficulty": difficulty},
    )
    return task, world


def world_for_task(task: TaskInstance) -> MiniShopWorld:
    for key in ("world_seed", "difficulty"):
        if key not in task.metadata:
            raise EnvError(f"task {task.task_id!r} is missing metadata field {key!r}")
    try:
        seed = int(task.metadata["world_seed"])
    except ValueError:
        raise EnvError(f"task {task.task_id!r} has a non-integer world_seed") from None
    return make_world(seed, task.metadata["difficulty"])


# --------------------------------------------------------------------------
# dynamics


def _render_item_line(it: Item) -> str:
    return f"[{it.item_id}] {it.title_text} ${it.price:.2f}"


def search(world: MiniShopWorld, words: list[str]) -> list[Item]:
    query = {w.lower() for w in words}
    scored = [(len(query & set(it.title)), it) for it in world.catalog]
    hits = [(s, it) for s, it in scored if s > 0]
    hits.sort(key=lambda p: (-p[0], p[1].item_id))
    return [it for _, it in hits[:MAX_SEARCH_RESULTS]]


def reset(spec: EnvSpec, task: TaskInstance, seed: int,
          world: MiniShopWorld | None = None) -> tuple[EnvState, str]:
    if world is None:
        world = world_for_task(task)
    listing = [it.item_id for it in world.catalog]
    random.Random(seed).shuffle(listing)
    state = EnvState(world=world, spec=spec, rng_seed=seed, turn=0, listing=tuple(listing))
    featured = ", ".join(listing[:3])
    obs = (
        f"Welcome to MiniShop. {len(world.catalog)} items in stock. Featured: {featured}.\n"
        f"Actions: {'; '.join(spec.action_grammar)}."
    )
    return state, obs


def _parse_action(action: str) -> tuple[str, str]:
    parts = action.strip().split(None, 1)
    if not parts:
        return "", ""
    return parts[0].lower(), parts[1].strip() if len(parts) > 1 else ""


def step(state: EnvState, action: str) -> tuple[EnvState, str, bool]:
    if state.terminal:
        raise ContractViolation("step called on a terminal state")
    world = state.world
    verb, arg = _parse_action(action)
    terminal = finished = False
    if verb == "search" and arg:
        hits = search(world, re.findall(r"[^\W_]+", arg))
        if hits:
            obs = f"Results for '{arg}':\n" + "\n".join(_render_item_line(it) for it in hits)
        else:
            obs = f"No results for '{arg}'."
    elif verb == "view" and arg:
        it = world.item(arg)
        if it is None:
            obs = f"Item {arg} not found."
        else:
            listed = sorted(it.attributes & set(it.title))
            obs = (
                f"[{it.item_id}] {it.title_text}\nPrice: ${it.price:.2f}\n"
                f"Attributes: {', '.join(listed)}\nDescription: {it.description}"
            )
    elif verb == "buy" and arg:
        terminal = finished = True
        obs = f"Purchased {arg}. Thank you." if world.item(arg) else f"Item {arg} not found. Order cancelled."
    else:
        obs = INVALID_ACTION
    turn = state.turn + 1
    if turn >= state.spec.max_turns:
        terminal = True
    return replace(state, turn=turn, terminal=terminal, agent_finished=finished), obs, terminal


def bought_item(trajectory: Trajectory) -> str | None:
    for s in trajectory.steps:
        verb, arg = _parse_action(s.action)
        if verb == "buy" and arg:
            return arg
    return None


def score(world: MiniShopWorld, trajectory: Trajectory) -> float:
    """Fraction of target attributes on the bought item, halved when over budget."""
    item_id = bought_item(trajectory)
    if item_id is None:
        return 0.0
    it = world.item(item_id)
    if it is None:
        return 0.0
    matched = len(world.target_attributes & it.attributes) / len(world.target_attributes)
    price_ok = 1.0 if it.price <= world.price_ceiling else 0.5
    return matched * price_ok


def solve(world: MiniShopWorld) -> list[str]:
    """Action script reaching reward 1.0, read straight off the latent world."""
    best = next(it for it in world.catalog
                if world.target_attributes <= it.attributes and it.price <= world.price_ceiling)
    return [f"search {best.title_text}", f"view {best.item_id}", f"buy {best.item_id}"]


class MiniShop:
    """:class:`Environment` adapter with a per-task world cache."""

    def __init__(self):
        self._worlds: dict[str, MiniShopWorld] = {}

    def world(self, task: TaskInstance) -> MiniShopWorld:
        w = self._worlds.get(task.task_id)
        if w is None:
            w = self._worlds[task.task_id] = world_for_task(task)
        return w

    def reset(self, spec: EnvSpec, task: TaskInstance, seed: int) -> tuple[EnvState, str]:
        return reset(spec, task, seed, self.world(task))

    def step(self, state: EnvState, action: str) -> tuple[EnvState, str, bool]:
        return step(state, action)

    def score(self, task: TaskInstance, trajectory: Trajectory) -> float:
        return score(self.world(task), trajectory)
