"""Pipeline configuration: one strict YAML file drives every subcommand."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .agent import BackendProfile, Rulebook, register_mock
from .cam import CAM_KINDS, EmbeddingConfig
from .errors import ConfigError
from .grpo import TrainConfig
from .minishop import DIFFICULTIES, EnvSpec
from .retry import RetryPolicy


@dataclass
class Paths:
    tasks: str | None = None  # None: generate MiniShop tasks from the env section
    archives: str = "work/archives"
    datasets: str = "work/datasets"
    checkpoints: str = "work/checkpoints"
    reports: str = "work/reports"


@dataclass
class BackendSettings:
    endpoint: str | None = None
    model_name: str = "mock"
    temperature: float = 0.7
    max_output_tokens: int = 512
    timeout: float = 60.0
    max_attempts: int = 3
    backoff_base: float = 0.5
    rulebook: str | None = None  # a rulebook file turns the profile into a local mock

    def profile(self, name: str) -> BackendProfile:
        endpoint = self.endpoint
        if self.rulebook is not None:
            endpoint = f"mock:rules-{name}"
            register_mock(f"rules-{name}", Rulebook.load(self.rulebook))
        if endpoint is None:
            raise ConfigError(f"backends.{name}.endpoint: not set")
        return BackendProfile(endpoint, self.model_name, self.temperature, self.max_output_tokens, self.timeout,
                              RetryPolicy(self.max_attempts, self.backoff_base))


@dataclass
class Backends:
    exec: BackendSettings = field(default_factory=lambda: BackendSettings("mock:minishop-shopper"))
    reflector: BackendSettings = field(default_factory=lambda: BackendSettings("mock:minishop-reflector"))
    cam: BackendSettings = field(default_factory=BackendSettings)


@dataclass
class EmbeddingSettings:
    mode: str = "hashed"
    dim: int = 256
    endpoint: str | None = None
    model_name: str = "embedding"
    timeout: float = 30.0

    def build(self) -> EmbeddingConfig:
        return EmbeddingConfig(self.mode, self.dim, self.endpoint, self.model_name, self.timeout)


@dataclass
class EnvSettings:
    name: str = "minishop"
    max_turns: int = 30
    gamma: float = 1.0
    difficulty: str = "hard"
    task_count: int = 20
    first_task_seed: int = 0

    def spec(self) -> EnvSpec:
        return EnvSpec(self.name, self.gamma, self.max_turns)


@dataclass
class ReflectionSettings:
    m: int = 6
    k: int = 3
    cap: int | None = None


@dataclass
class CamSettings:
    kind: str = "template_policy"
    library_size: int = 8
    collapse_store: bool = False  # one retrieval entry per task instead of per (task, subset)


@dataclass
class TrainSettings:
    group_size: int = 4
    epochs: int = 15
    learning_rate: float = 0.02
    kl_coef: float = 0.001
    clip_ratio: float = 0.2
    batch_size: int = 4
    optimizer: str = "adam"

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(self.group_size, self.epochs, self.learning_rate, self.kl_coef, self.clip_ratio,
                           batch_size=self.batch_size, seed=seed, optimizer=self.optimizer)


@dataclass
class EvalSettings:
    runs: int = 3
    seeds: list[int] | None = None  # None: derived from the top-level seed
    pass_k: list[int] = field(default_factory=lambda: [3])
    threshold: float = 1.0 - 1e-9
    split: str = "test"


@dataclass
class SplitSettings:
    ratio: float = 0.8
    seed: int = 0


@dataclass
class PipelineConfig:
    seed: int = 0
    concurrency: int = 8
    paths: Paths = field(default_factory=Paths)
    backends: Backends = field(default_factory=Backends)
    embedding: EmbeddingSettings = field(default_factory=EmbeddingSettings)
    env: EnvSettings = field(default_factory=EnvSettings)
    reflection: ReflectionSettings = field(default_factory=ReflectionSettings)
    cam: CamSettings = field(default_factory=CamSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    split: SplitSettings = field(default_factory=SplitSettings)


# --------------------------------------------------------------------------
# strict loading


class _UniqueKeyLoader(yaml.SafeLoader):
    pass


def _mapping_no_dupes(loader: yaml.SafeLoader, node: yaml.MappingNode, deep: bool = False) -> dict:
    seen = set()
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} at line {key_node.start_mark.line + 1}")
        seen.add(key)
    return loader.construct_mapping(node, deep)


_UniqueKeyLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _mapping_no_dupes)


def _check_scalar(value: Any, hint: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_scalar(value, inner[0], where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return [_check_scalar(v, args[0], f"{where}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false, got {type(value).__name__}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {type(value).__name__}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {type(value).__name__}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {type(value).__name__}")
        return value
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    raise ConfigError(f"{where}: unsupported type {hint!r}")  # pragma: no cover


def _build(cls: type, data: Any, where: str) -> Any:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{where + '.' if where else ''}{key}: unknown key")
    default = cls()
    kwargs = {}
    for name in names:
        path = f"{where}.{name}" if where else name
        kwargs[name] = _check_scalar(data[name], hints[name], path) if name in data else getattr(default, name)
    return cls(**kwargs)


def _validate(cfg: PipelineConfig) -> None:
    checks = [
        (cfg.seed >= 0, "seed", "must be >= 0"),
        (cfg.concurrency >= 1, "concurrency", "must be >= 1"),
        (cfg.env.name == "minishop", "env.name", "only 'minishop' is built in"),
        (cfg.env.difficulty in DIFFICULTIES, "env.difficulty", f"must be one of {DIFFICULTIES}"),
        (cfg.env.task_count >= 2, "env.task_count", "must be >= 2"),
        (cfg.reflection.m >= 1, "reflection.m", "must be >= 1"),
        (1 <= cfg.reflection.k <= cfg.reflection.m, "reflection.k", "must be in [1, m]"),
        (cfg.reflection.cap is None or cfg.reflection.cap >= 1, "reflection.cap", "must be >= 1"),
        (cfg.cam.kind in CAM_KINDS, "cam.kind", f"must be one of {CAM_KINDS}"),
        (cfg.cam.library_size >= 1, "cam.library_size", "must be >= 1"),
        (cfg.embedding.mode in ("hashed", "remote"), "embedding.mode", "must be 'hashed' or 'remote'"),
        (cfg.eval.runs >= 1, "eval.runs", "must be >= 1"),
        (cfg.eval.seeds is None or len(cfg.eval.seeds) == cfg.eval.runs, "eval.seeds", "needs one seed per run"),
        (all(1 <= k <= cfg.eval.runs for k in cfg.eval.pass_k), "eval.pass_k", "each k must be in [1, runs]"),
        (0.0 < cfg.eval.threshold <= 1.0, "eval.threshold", "must be in (0, 1]"),
        (cfg.eval.split in ("train", "test", "all"), "eval.split", "must be train, test or all"),
        (0.0 < cfg.split.ratio < 1.0, "split.ratio", "must be in (0, 1)"),
    ]
    for ok, key, msg in checks:
        if not ok:
            raise ConfigError(f"{key}: {msg}")
    try:
        cfg.train.build(cfg.seed)
        cfg.env.spec()
    except ValueError as e:
        raise ConfigError(f"train/env: {e}") from None


def parse_config(text: str) -> PipelineConfig:
    try:
        data = yaml.load(text, Loader=_UniqueKeyLoader)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}") from None
    cfg = _build(PipelineConfig, data, "")
    _validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    """Defaults when ``path`` is None; otherwise a strictly parsed YAML file."""
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    cfg = parse_config(p.read_text(encoding="utf-8"))
    if cfg.paths.tasks is not None and not Path(cfg.paths.tasks).is_file():
        raise ConfigError(f"paths.tasks: file not found: {cfg.paths.tasks}")
    for name in ("exec", "reflector", "cam"):
        rb = getattr(cfg.backends, name).rulebook
        if rb is not None and not Path(rb).is_file():
            raise ConfigError(f"backends.{name}.rulebook: file not found: {rb}")
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=False)
