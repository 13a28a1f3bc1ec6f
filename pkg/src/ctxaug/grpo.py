"""Group-relative policy optimisation of the template policy.

Each task gets a group of ``n`` sampled templates. Every template is scored by
running the frozen execution agent on the task with that guidance appended,
rewards are standardised within the group, and the policy takes one clipped
policy-gradient step per minibatch with a KL penalty towards its reference
weights. Gradients are exact (closed form for the categorical policy).
"""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import BackendProfile, compose_context, run_episode
from .cam import FEATURE_BUCKETS, TemplatePolicy, features, library_digest, log_softmax, policy_kl, sample_template
from .errors import CtxAugError
from .hashing import stable_hash
from .minishop import Environment, EnvSpec
from .orchestrator import run_ordered
from .records import RecordKind, TaskInstance, read_records, register_kind, write_records

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 4
    epochs: int = 15
    learning_rate: float = 0.02
    kl_coef: float = 0.001
    clip_ratio: float = 0.2
    advantage_epsilon: float = 1e-8
    batch_size: int = 4
    seed: int = 0
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.kl_coef < 0:
            raise ValueError("kl_coef must be >= 0")
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip_ratio must be in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


class Adam:
    """Bias-corrected Adam on a single weight matrix."""

    def __init__(self, shape: tuple[int, ...], lr: float, betas: tuple[float, float], eps: float):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, w: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return w - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class Draw:
    template: int
    guidance: str
    logprob_old: float
    reward: float = 0.0
    advantage: float | None = None


@dataclass
class GroupSample:
    task: TaskInstance
    features: np.ndarray
    draws: list[Draw] = field(default_factory=list)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_reward: float
    mean_kl: float
    loss: float


register_kind(RecordKind(
    "train_history", EpochStats, ("epoch", "mean_reward", "mean_kl", "loss"),
    lambda e: {"epoch": e.epoch, "mean_reward": e.mean_reward, "mean_kl": e.mean_kl, "loss": e.loss},
    lambda d: EpochStats(d["epoch"], float(d["mean_reward"]), float(d["mean_kl"]), float(d["loss"])),
    identity=lambda e: e.epoch,
))


def group_advantages(rewards: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    """(r - mean) / (std + eps) with the population std; all zeros for a constant group."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("a group needs at least 2 rewards")
    # compare values, not the float std: the rounded mean of equal rewards can miss them by an ulp
    if np.all(r == r[0]):
        return np.zeros_like(r)
    centred = r - r.mean()
    std = r.std()
    return centred / (std + eps)


def grpo_objective(policy: TemplatePolicy, samples: Sequence[GroupSample],
                   cfg: TrainConfig) -> tuple[float, np.ndarray]:
    """Clipped surrogate loss plus KL penalty, and its exact gradient w.r.t. the weights.

    loss = -mean_draws min(rho*A, clip(rho)*A) + kl_coef * mean_tasks KL(pi || pi_ref)
    """
    w = policy.weights
    if not np.all(np.isfinite(w)):
        raise CtxAugError("policy weights are not finite")
    n_draws = sum(len(s.draws) for s in samples)
    if n_draws == 0:
        raise ValueError("no draws to optimise")
    lo, hi = 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio
    loss = 0.0
    grad = np.zeros_like(w)
    for s in samples:
        f = s.features
        lp = log_softmax(f @ w)
        p = np.exp(lp)
        gz = np.zeros_like(p)
        for d in s.draws:
            if d.advantage is None:
                raise ValueError("advantages must be filled before computing the objective")
            a = d.advantage
            ratio = float(np.exp(lp[d.template] - d.logprob_old))
            unclipped = ratio * a
            clipped = min(max(ratio, lo), hi) * a
            loss -= min(unclipped, clipped) / n_draws
            if unclipped <= clipped:
                g = -p * (a * ratio)
                g[d.template] += a * ratio
                gz -= g / n_draws
        if cfg.kl_coef:
            lq = log_softmax(f @ policy.reference)
            kl = float(np.sum(p * (lp - lq)))
            loss += cfg.kl_coef * kl / len(samples)
            gz += cfg.kl_coef * p * ((lp - lq) - kl) / len(samples)
        grad += np.outer(f, gz)
    return float(loss), grad


def finite_diff_check(policy: TemplatePolicy, samples: Sequence[GroupSample], cfg: TrainConfig,
                      step: float = 1e-5, n_coords: int = 50,
                      rng: np.random.Generator | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Coordinates are drawn from feature rows that are non-zero in some sample,
    since all other rows have an exactly zero gradient.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    rng = rng or np.random.default_rng(0)
    _, grad = grpo_objective(policy, samples, cfg)
    rows = sorted({int(i) for s in samples for i in np.flatnonzero(s.features)})
    coords = [(r, c) for r in rows for c in range(policy.n_templates)]
    if len(coords) > n_coords:
        coords = [coords[i] for i in rng.choice(len(coords), size=n_coords, replace=False)]
    worst = 0.0
    for r, c in coords:
        w = policy.weights.copy()
        w[r, c] += step
        plus, _ = grpo_objective(policy.with_weights(w), samples, cfg)
        w[r, c] -= 2 * step
        minus, _ = grpo_objective(policy.with_weights(w), samples, cfg)
        numeric = (plus - minus) / (2 * step)
        # the floor keeps coordinates whose true gradient is ~0 from dividing noise by noise
        scale = max(abs(grad[r, c]), abs(numeric), 1e-8)
        worst = max(worst, abs(grad[r, c] - numeric) / scale)
    return worst


def random_problem(rng: np.random.Generator, cfg: TrainConfig = TrainConfig()
                   ) -> tuple[TemplatePolicy, list[GroupSample]]:
    """A random policy with filled-in groups, used by gradient checks.

    Old log-probabilities are jittered around the current ones so that some
    draws sit inside the clip range and some outside it.
    """
    n_templates = int(rng.integers(3, 7))
    dim = FEATURE_BUCKETS + 1
    policy = TemplatePolicy(tuple(f"template {i}" for i in range(n_templates)),
                            rng.normal(0.0, 0.3, (dim, n_templates)), rng.normal(0.0, 0.3, (dim, n_templates)))
    samples = []
    for t in range(int(rng.integers(1, 5))):
        f = np.zeros(dim)
        f[rng.choice(FEATURE_BUCKETS, size=20, replace=False)] = rng.integers(1, 3, size=20)
        f[-1] = 1.0
        lp = log_softmax(f @ policy.weights)
        picks = rng.integers(0, n_templates, size=cfg.group_size)
        draws = [Draw(int(v), policy.templates[v], float(lp[v] + rng.normal(0.0, 0.3)), float(rng.random()))
                 for v in picks]
        for d, a in zip(draws, group_advantages([d.reward for d in draws], cfg.advantage_epsilon)):
            d.advantage = float(a)
        samples.append(GroupSample(TaskInstance(f"random-{t}", "random", "random problem"), f, draws))
    return policy, samples


def backend_digest(backend: BackendProfile) -> str:
    return hashlib.sha256(repr(backend).encode("utf-8")).hexdigest()


def sample_groups(policy: TemplatePolicy, tasks: Sequence[TaskInstance], n: int,
                  rng: np.random.Generator) -> list[GroupSample]:
    out = []
    for task in tasks:
        f = features(task, policy.feature_dim - 1)
        draws = [Draw(*sample_template(policy, f, rng)) for _ in range(n)]
        out.append(GroupSample(task, f, draws))
    return out


def train(policy: TemplatePolicy, tasks: Sequence[TaskInstance], env_factory: Callable[[], Environment],
          exec_backend: BackendProfile, system_prompt: str, cfg: TrainConfig = TrainConfig(),
          spec: EnvSpec = EnvSpec(), concurrency: int = 1,
          on_epoch: Callable[[EpochStats, TemplatePolicy], None] | None = None,
          ) -> tuple[TemplatePolicy, list[EpochStats]]:
    """Optimise ``policy`` for the reward the frozen execution agent earns with its guidance.

    Per epoch the tasks are shuffled into minibatches of ``cfg.batch_size``; each
    task contributes a group of ``cfg.group_size`` templates, each run through one
    episode. One gradient step is taken per minibatch. The reference weights
    and the execution backend are never modified.
    """
    if not tasks:
        raise ValueError("no training tasks")
    rng = np.random.default_rng(cfg.seed)
    frozen = backend_digest(exec_backend)
    adam = Adam(policy.weights.shape, cfg.learning_rate, cfg.adam_betas, cfg.adam_epsilon)
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(tasks))
        rewards, kls, losses = [], [], []
        for b in range(0, len(order), cfg.batch_size):
            batch = [tasks[i] for i in order[b:b + cfg.batch_size]]
            groups = sample_groups(policy, batch, cfg.group_size, rng)
            jobs = [(epoch, g.task, j, d.guidance) for g in groups for j, d in enumerate(g.draws)]

            def play(job):
                epoch, task, j, guidance = job
                seed = stable_hash(cfg.seed, "grpo", epoch, task.task_id, j)
                rt = run_episode(env_factory(), compose_context(task, guidance), exec_backend,
                                 system_prompt, spec, seed=seed, run_id=j)
                if rt.trajectory.terminated == "backend_error":
                    log.warning("epoch %d: backend error on %s draw %d, scored 0", epoch, task.task_id, j)
                return rt.reward

            results = iter(run_ordered(play, jobs, concurrency))
            for g in groups:
                for d in g.draws:
                    d.reward = next(results)
                for d, a in zip(g.draws, group_advantages([d.reward for d in g.draws], cfg.advantage_epsilon)):
                    d.advantage = float(a)
                rewards.extend(d.reward for d in g.draws)
                kls.append(policy_kl(policy, g.features))
            loss, grad = grpo_objective(policy, groups, cfg)
            losses.append(loss)
            if cfg.optimizer == "adam":
                policy = policy.with_weights(adam.step(policy.weights, grad))
            else:
                policy = policy.with_weights(policy.weights - cfg.learning_rate * grad)
        stats = EpochStats(epoch, float(np.mean(rewards)), float(np.mean(kls)), float(np.mean(losses)))
        history.append(stats)
        log.info("epoch=%d mean_reward=%.4f mean_kl=%.5f loss=%.5f",
                 stats.epoch, stats.mean_reward, stats.mean_kl, stats.loss)
        if on_epoch is not None:
            on_epoch(stats, policy)
    if backend_digest(exec_backend) != frozen:
        raise CtxAugError("execution backend changed during training")
    return policy, history


# --------------------------------------------------------------------------
# checkpoints


@dataclass(frozen=True)
class PolicyCheckpoint:
    library_digest: str
    templates: tuple[str, ...]
    weights: tuple[tuple[float, ...], ...]
    reference: tuple[tuple[float, ...], ...]


def _rows(a: np.ndarray) -> tuple[tuple[float, ...], ...]:
    return tuple(tuple(float(x) for x in row) for row in a)


register_kind(RecordKind(
    "policy_checkpoint", PolicyCheckpoint, ("library_digest", "templates", "weights", "reference"),
    lambda c: {"library_digest": c.library_digest, "templates": list(c.templates),
               "weights": [list(r) for r in c.weights], "reference": [list(r) for r in c.reference]},
    lambda d: PolicyCheckpoint(d["library_digest"], tuple(d["templates"]),
                               _rows(np.array(d["weights"], dtype=float)),
                               _rows(np.array(d["reference"], dtype=float))),
))


def save_checkpoint(policy: TemplatePolicy, path: str | Path) -> None:
    write_records(path, [PolicyCheckpoint(library_digest(policy.templates), policy.templates,
                                          _rows(policy.weights), _rows(policy.reference))])


def load_checkpoint(path: str | Path, templates: Sequence[str] | None = None) -> TemplatePolicy:
    """Load a policy; when ``templates`` is given it must be the library the checkpoint was trained on."""
    (ck,) = read_records(path, expect="policy_checkpoint")
    if library_digest(ck.templates) != ck.library_digest:
        raise CtxAugError(f"{path}: template library digest does not match its templates")
    if templates is not None and library_digest(templates) != ck.library_digest:
        raise CtxAugError(f"{path}: checkpoint was trained on a different template library")
    return TemplatePolicy(ck.templates, np.array(ck.weights), np.array(ck.reference))
