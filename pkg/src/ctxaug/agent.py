"""Execution-agent runtime: chat backends, context composition, episodes.

Chat wire contract (HTTP backends). One POST to ``<endpoint>/chat/completions``::

    {"model": str,
     "messages": [{"role": "system"|"user"|"assistant"|"tool", "content": str}, ...],
     "temperature": float,
     "max_tokens": int}

The reply text is ``choices[0].message.content``. Transport failures,
timeouts and non-2xx statuses are transient (retried); an unparseable body
is permanent. A bearer token is read from ``CTXAUG_API_KEY`` when set.

Mock backends use endpoints of the form ``mock:<id>``; ``<id>`` names a
responder registered with :func:`register_mock`.
"""

from __future__ import annotations

import json
import logging
import os
import re
import urllib.error
import urllib.request
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol

from .errors import BackendError, PermanentBackendError, TransientBackendError
from .minishop import Environment, EnvSpec
from .records import RewardedTrajectory, StepRecord, TaskInstance, Trajectory
from .retry import RetryPolicy, with_retries

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant", "tool")
GUIDANCE_HEADING = "## Strategy Guidance"
GUIDANCE_DELIMITER = "\n\n" + GUIDANCE_HEADING + "\n"
API_KEY_ENV = "CTXAUG_API_KEY"
MOCK_FALLBACK = "noop"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role in ("user", "assistant") and not self.content:
            raise ValueError(f"{self.role} message must have content")


@dataclass(frozen=True)
class BackendProfile:
    endpoint: str
    model_name: str = "mock"
    temperature: float = 0.7
    max_output_tokens: int = 512
    timeout: float = 60.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")

    @property
    def is_mock(self) -> bool:
        return self.endpoint.startswith("mock:")


# --------------------------------------------------------------------------
# mock backends


class MockResponder(Protocol):
    def __call__(self, messages: Sequence[ChatMessage], seed: int | None) -> str: ...


_MOCKS: dict[str, MockResponder] = {}


def register_mock(name: str, responder: MockResponder) -> None:
    _MOCKS[name] = responder


def get_mock(name: str) -> MockResponder:
    try:
        return _MOCKS[name]
    except KeyError:
        raise PermanentBackendError(f"no mock backend registered as {name!r}") from None


def last_prompt(messages: Sequence[ChatMessage]) -> str:
    """Content of the last user or tool message (what a rulebook reacts to)."""
    for m in reversed(messages):
        if m.role in ("user", "tool"):
            return m.content
    return ""


@dataclass
class Rulebook:
    """Pattern -> reply table. The longest matching pattern wins; file order breaks ties."""

    rules: list[tuple[str, str]]
    fallback: str = MOCK_FALLBACK

    def respond(self, text: str) -> str:
        best = None
        for pattern, reply in self.rules:
            if pattern in text and (best is None or len(pattern) > len(best[0])):
                best = (pattern, reply)
        return best[1] if best else self.fallback

    def __call__(self, messages: Sequence[ChatMessage], seed: int | None = None) -> str:
        return self.respond(last_prompt(messages))

    @classmethod
    def parse(cls, text: str) -> Rulebook:
        rules = []
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=>" not in line:
                raise ValueError(f"rulebook line {n}: expected 'pattern => reply'")
            pattern, reply = (p.strip() for p in line.split("=>", 1))
            if not pattern:
                raise ValueError(f"rulebook line {n}: empty pattern")
            rules.append((pattern, reply.replace("\\n", "\n")))
        return cls(rules)

    @classmethod
    def load(cls, path: str | Path) -> Rulebook:
        return cls.parse(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# completion


def chat_url(endpoint: str) -> str:
    endpoint = endpoint.rstrip("/")
    return endpoint if endpoint.endswith("/chat/completions") else endpoint + "/chat/completions"


def chat_request_body(backend: BackendProfile, messages: Sequence[ChatMessage]) -> dict:
    return {
        "model": backend.model_name,
        "messages": [{"role": m.role, "content": m.content} for m in messages],
        "temperature": backend.temperature,
        "max_tokens": backend.max_output_tokens,
    }


def post_json(url: str, body: dict, timeout: float) -> dict:
    data = json.dumps(body).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(API_KEY_ENV)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    req = urllib.request.Request(url, data=data, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            raw = resp.read()
    except urllib.error.HTTPError as e:
        raise TransientBackendError(f"HTTP {e.code} from {url}") from None
    except (urllib.error.URLError, TimeoutError, ConnectionError) as e:
        raise TransientBackendError(f"transport failure talking to {url}: {e}") from None
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise PermanentBackendError(f"malformed response body from {url}") from None


def _complete_once(backend: BackendProfile, messages: Sequence[ChatMessage], seed: int | None) -> str:
    if backend.is_mock:
        return get_mock(backend.endpoint[len("mock:"):])(messages, seed)
    doc = post_json(chat_url(backend.endpoint), chat_request_body(backend, messages), backend.timeout)
    try:
        content = doc["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise PermanentBackendError("response has no choices[0].message.content") from None
    if not isinstance(content, str):
        raise PermanentBackendError("choices[0].message.content is not a string")
    return content


def complete(backend: BackendProfile, messages: Sequence[ChatMessage], seed: int | None = None) -> str:
    if not messages:
        raise ValueError("messages must be non-empty")
    if messages[0].role not in ("system", "user"):
        raise ValueError("first message must be system or user")
    result, _ = with_retries(lambda: _complete_once(backend, messages, seed), backend.retry)
    return result


# --------------------------------------------------------------------------
# context composition


@dataclass(frozen=True)
class AugmentedTask:
    base: TaskInstance
    guidance: str | None
    composed: str


def compose_context(q: TaskInstance | AugmentedTask, c: str | None) -> AugmentedTask:
    """Append guidance ``c`` to the task description under a fixed heading."""
    if isinstance(q, AugmentedTask) or GUIDANCE_DELIMITER in q.description:
        raise ValueError("double augmentation: task already carries guidance")
    if c is None:
        return AugmentedTask(q, None, q.description)
    if not c.strip():
        raise ValueError("guidance is empty after trimming")
    return AugmentedTask(q, c, q.description + GUIDANCE_DELIMITER + c)


# --------------------------------------------------------------------------
# episodes


_FENCE = re.compile(r"```[^\n]*\n(.*?)(?:```|$)", re.S)


def parse_action(reply: str) -> str:
    """First non-empty line of the first fenced block, else of the reply."""
    m = _FENCE.search(reply)
    body = m.group(1) if m else reply
    for line in body.splitlines():
        if line.strip():
            return line.strip()
    return ""


def load_prompt(name: str) -> str:
    return resources.files("ctxaug.prompts").joinpath(name).read_text(encoding="utf-8")


def episode_messages(system_prompt: str, task_text: str, first_observation: str,
                     steps: Sequence[StepRecord]) -> list[ChatMessage]:
    msgs = [ChatMessage("system", system_prompt),
            ChatMessage("user", f"{task_text}\n\nObservation:\n{first_observation}")]
    for s in steps:
        msgs.append(ChatMessage("assistant", s.action))
        msgs.append(ChatMessage("tool", s.observation))
    return msgs


def run_episode(env: Environment, task: AugmentedTask, backend: BackendProfile, system_prompt: str,
                spec: EnvSpec, seed: int, run_id: int = 0,
                on_messages: Callable[[list[ChatMessage]], None] | None = None) -> RewardedTrajectory:
    """Play one episode of ``task`` and score it. Never raises on backend failures."""
    state, first_obs = env.reset(spec, task.base, seed)
    steps: list[StepRecord] = []
    terminated = "max_turns"
    while len(steps) < spec.max_turns:
        msgs = episode_messages(system_prompt, task.composed, first_obs, steps)
        if on_messages is not None:
            on_messages(msgs)
        try:
            reply = complete(backend, msgs, seed=seed)
        except BackendError as e:
            log.warning("episode %s/%d: backend error at turn %d: %s", task.base.task_id, run_id, len(steps), e)
            terminated = "backend_error"
            break
        action = parse_action(reply) or "(empty reply)"
        state, obs, terminal = env.step(state, action)
        verb = action.split(None, 1)[0].lower()
        steps.append(StepRecord(len(steps), action, obs, verb))
        if terminal:
            finished = getattr(state, "agent_finished", len(steps) < spec.max_turns)
            terminated = "agent_done" if finished else "max_turns"
            break
    traj = Trajectory(task.base.task_id, run_id, seed, tuple(steps), terminated, len(steps))
    reward = 0.0 if terminated == "backend_error" else float(env.score(task.base, traj))
    return RewardedTrajectory(traj, reward)
