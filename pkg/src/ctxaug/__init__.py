"""Context augmentation for LLM agents: replay collection, contrastive reflection,
a trainable guidance generator and evaluation, runnable offline on MiniShop."""

from __future__ import annotations

from . import mocks  # noqa: F401  registers the built-in mock backends
from .agent import BackendProfile, compose_context, run_episode
from .cam import CamBackend, TemplatePolicy, generate
from .config import PipelineConfig, load_config
from .evaluation import EvalReport, compare, evaluate
from .grpo import TrainConfig, train
from .minishop import EnvSpec, MiniShop, make_minishop_task
from .orchestrator import collect_replays
from .records import decode_records, encode_records
from .reflection import build_sft_dataset, reflect

__all__ = [
    "BackendProfile", "CamBackend", "EnvSpec", "EvalReport", "MiniShop", "PipelineConfig", "TemplatePolicy",
    "TrainConfig", "build_sft_dataset", "collect_replays", "compare", "compose_context", "decode_records",
    "encode_records", "evaluate", "generate", "load_config", "make_minishop_task", "reflect", "run_episode",
    "train",
]
