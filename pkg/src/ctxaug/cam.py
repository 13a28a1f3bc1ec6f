"""Context augmentation backends: none, remote endpoint, retrieval, template policy."""

from __future__ import annotations

import math
import re
import time
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import BackendProfile, ChatMessage, complete, post_json
from .errors import CtxAugError, PermanentBackendError
from .hashing import digest_text, fnv1a_64
from .records import GuidanceRecord, RecordKind, TaskInstance, register_kind

FEATURE_BUCKETS = 256
CAM_KINDS = ("none", "endpoint", "retrieval", "template_policy")
ENDPOINT_INSTRUCTION = (
    "Write concise, task-specific strategy guidance for an agent about to attempt the task below. "
    "Start with 'The strategy for completing this task is'.\n\nTask:\n{task}"
)

TIE_TOLERANCE = 1e-12
_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def bucket(token: str, dim: int = FEATURE_BUCKETS) -> int:
    return fnv1a_64(token.encode("utf-8")) % dim


def bucket_counts(text: str, dim: int = FEATURE_BUCKETS) -> np.ndarray:
    counts = np.zeros(dim)
    for tok in tokenize(text):
        counts[bucket(tok, dim)] += 1.0
    return counts


# --------------------------------------------------------------------------
# embeddings and retrieval


@dataclass(frozen=True)
class EmbeddingConfig:
    """``mode="hashed"`` is the offline bag-of-tokens embedding; ``"remote"`` calls ``/embeddings``."""

    mode: str = "hashed"
    dim: int = FEATURE_BUCKETS
    endpoint: str | None = None
    model_name: str = "embedding"
    timeout: float = 30.0


def embed(cfg: EmbeddingConfig, text: str) -> np.ndarray:
    if cfg.mode == "hashed":
        v = bucket_counts(text, cfg.dim)
    elif cfg.mode == "remote":
        url = cfg.endpoint.rstrip("/")
        url = url if url.endswith("/embeddings") else url + "/embeddings"
        doc = post_json(url, {"model": cfg.model_name, "input": text}, cfg.timeout)
        try:
            v = np.asarray(doc["data"][0]["embedding"], dtype=float)
        except (KeyError, IndexError, TypeError, ValueError):
            raise PermanentBackendError("embedding response has no data[0].embedding") from None
    else:
        raise ValueError(f"unknown embedding mode {cfg.mode!r}")
    if not np.all(np.isfinite(v)):
        raise CtxAugError("embedding has non-finite values")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise CtxAugError("no tokens in text")
    return v / norm


@dataclass(frozen=True)
class StoreEntry:
    task_id: str
    vector: tuple[float, ...]
    guidance: str


register_kind(RecordKind(
    "vector_entry", StoreEntry, ("task_id", "vector", "guidance"),
    lambda e: {"task_id": e.task_id, "vector": list(e.vector), "guidance": e.guidance},
    lambda d: StoreEntry(d["task_id"], tuple(float(x) for x in d["vector"]), d["guidance"]),
    identity=lambda e: e.task_id,
))


class VectorStore:
    """Unit-normalised vectors with guidance, searched by exact cosine similarity."""

    def __init__(self, dim: int):
        self.dim = dim
        self.entries: list[StoreEntry] = []
        self._ids: set[str] = set()
        self._matrix = np.zeros((0, dim))

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, task_id: str, vector: np.ndarray, guidance: str) -> None:
        v = np.asarray(vector, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(f"dimension mismatch: store has {self.dim}, vector has {v.shape}")
        if task_id in self._ids:
            raise ValueError(f"duplicate task_id {task_id!r} in store")
        norm = np.linalg.norm(v)
        if norm == 0.0 or not np.isfinite(norm):
            raise ValueError("vector must be finite and non-zero")
        self._append(StoreEntry(task_id, tuple((v / norm).tolist()), guidance))

    def _append(self, entry: StoreEntry) -> None:
        self.entries.append(entry)
        self._ids.add(entry.task_id)
        self._matrix = np.vstack([self._matrix, np.array(entry.vector)])

    @classmethod
    def from_entries(cls, entries: Sequence[StoreEntry]) -> VectorStore:
        if not entries:
            raise ValueError("cannot infer dimension of an empty store")
        store = cls(len(entries[0].vector))
        for e in entries:
            if len(e.vector) != store.dim:
                raise ValueError(f"dimension mismatch: store has {store.dim}, entry has {len(e.vector)}")
            if e.task_id in store._ids:
                raise ValueError(f"duplicate task_id {e.task_id!r} in store")
            if abs(math.fsum(x * x for x in e.vector) - 1.0) > 1e-9:
                raise ValueError(f"entry {e.task_id!r} is not unit-normalised")
            store._append(e)  # stored vectors are already normalised; keep their exact bits
        return store

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix


def retrieve(store: VectorStore, query: np.ndarray) -> tuple[str, str, float]:
    """Entry with the highest cosine similarity; the earliest insertion wins ties."""
    if len(store) == 0:
        raise CtxAugError("retrieval on an empty store")
    q = np.asarray(query, dtype=float)
    if q.shape != (store.dim,):
        raise ValueError(f"dimension mismatch: store has {store.dim}, query has {q.shape}")
    q = q / np.linalg.norm(q)
    sims = store.matrix @ q
    # rounding can split mathematically equal similarities, so near-equal counts as a tie
    j = int(np.flatnonzero(sims >= sims.max() - TIE_TOLERANCE)[0])
    e = store.entries[j]
    return e.task_id, e.guidance, float(np.clip(sims[j], -1.0, 1.0))


def build_vector_store(records: Iterable[GuidanceRecord], tasks: dict[str, TaskInstance],
                       cfg: EmbeddingConfig = EmbeddingConfig(), collapse: bool = False) -> VectorStore:
    """Index the SFT pairs. With ``collapse`` only the first guidance per task is kept;
    otherwise each (task, subset) pair gets its own entry keyed ``task_id:i-j-k``."""
    store = VectorStore(cfg.dim)
    cache: dict[str, np.ndarray] = {}
    for rec in records:
        key = rec.task_id if collapse else f"{rec.task_id}:{'-'.join(map(str, rec.subset_run_ids))}"
        if collapse and key in store._ids:
            continue
        if rec.task_id not in cache:
            cache[rec.task_id] = embed(cfg, tasks[rec.task_id].description)
        store.add(key, cache[rec.task_id], rec.guidance)
    return store


# --------------------------------------------------------------------------
# template policy


def features(q: TaskInstance | str, dim: int = FEATURE_BUCKETS) -> np.ndarray:
    """Hashed token counts plus a trailing constant bias feature (length ``dim + 1``)."""
    text = q if isinstance(q, str) else q.description
    return np.append(bucket_counts(text, dim), 1.0)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def library_digest(templates: Sequence[str]) -> str:
    return digest_text("\n".join(templates))


@dataclass
class TemplatePolicy:
    """Categorical policy over guidance snippets: ``pi(v | f) = softmax(f @ weights)[v]``.

    ``reference`` is a frozen copy of the starting weights used for the KL penalty.
    """

    templates: tuple[str, ...]
    weights: np.ndarray
    reference: np.ndarray = field(default=None)

    def __post_init__(self):
        self.templates = tuple(self.templates)
        if len(self.templates) < 2:
            raise ValueError("a template policy needs at least 2 templates")
        self.weights = np.array(self.weights, dtype=float)
        if self.weights.ndim != 2 or self.weights.shape[1] != len(self.templates):
            raise ValueError("weights must have shape (feature_dim, n_templates)")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")
        ref = self.weights if self.reference is None else self.reference
        self.reference = np.array(ref, dtype=float)
        if self.reference.shape != self.weights.shape:
            raise ValueError("reference weights must match weights in shape")
        self.reference.flags.writeable = False

    @classmethod
    def uniform(cls, templates: Sequence[str], feature_dim: int = FEATURE_BUCKETS + 1) -> TemplatePolicy:
        return cls(tuple(templates), np.zeros((feature_dim, len(templates))))

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def n_templates(self) -> int:
        return len(self.templates)

    def logits(self, f: np.ndarray) -> np.ndarray:
        return f @ self.weights

    def probs(self, f: np.ndarray) -> np.ndarray:
        return softmax(self.logits(f))

    def with_weights(self, weights: np.ndarray) -> TemplatePolicy:
        return TemplatePolicy(self.templates, weights, self.reference)


def sample_template(p: TemplatePolicy, f: np.ndarray, rng: np.random.Generator) -> tuple[int, str, float]:
    logp = log_softmax(p.logits(f))
    cdf = np.cumsum(np.exp(logp))
    v = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    v = min(v, p.n_templates - 1)
    return v, p.templates[v], float(logp[v])


def policy_logprob(p: TemplatePolicy, f: np.ndarray, v: int) -> float:
    if not 0 <= v < p.n_templates:
        raise IndexError(f"template index {v} out of range")
    return float(log_softmax(p.logits(f))[v])


def policy_kl(p: TemplatePolicy, f: np.ndarray) -> float:
    """KL(pi_theta(.|f) || pi_ref(.|f)), exact over the template library."""
    lp = log_softmax(f @ p.weights)
    lq = log_softmax(f @ p.reference)
    return max(float(np.sum(np.exp(lp) * (lp - lq))), 0.0)


def read_template_library(path: str | Path) -> list[str]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        s = line.strip()
        if s and not s.startswith("#"):
            out.append(s)
    return out


def write_template_library(templates: Sequence[str], path: str | Path) -> None:
    lines = ["# one guidance snippet per line"]
    lines += [" ".join(t.split()) for t in templates]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def harvest_templates(records: Iterable[GuidanceRecord], top_n: int = 8) -> list[str]:
    """The ``top_n`` most frequent distinct guidance strings (ties: first seen)."""
    counts = Counter(" ".join(r.guidance.split()) for r in records)
    ranked = sorted(counts.items(), key=lambda kv: -kv[1])  # stable: first-seen order on ties
    return [g for g, _ in ranked[:top_n]]


# --------------------------------------------------------------------------
# unified backend


@dataclass
class CamBackend:
    kind: str = "none"
    endpoint: BackendProfile | None = None
    store: VectorStore | None = None
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    policy: TemplatePolicy | None = None

    def __post_init__(self):
        if self.kind not in CAM_KINDS:
            raise ValueError(f"unknown CAM kind {self.kind!r}")
        needed = {"endpoint": self.endpoint, "retrieval": self.store, "template_policy": self.policy}
        if self.kind in needed and needed[self.kind] is None:
            raise ValueError(f"CAM kind {self.kind!r} is missing its configuration")


@dataclass(frozen=True)
class Generation:
    guidance: str | None
    latency: float | None
    template_index: int | None = None
    logprob: float | None = None


def generate(cam: CamBackend, q: TaskInstance, rng: np.random.Generator) -> Generation:
    """Produce guidance for ``q``. Latency is wall-clock seconds, absent for ``none``."""
    if cam.kind == "none":
        return Generation(None, None)
    t0 = time.perf_counter()
    if cam.kind == "endpoint":
        msgs = [ChatMessage("user", ENDPOINT_INSTRUCTION.format(task=q.description))]
        c = complete(cam.endpoint, msgs)
        out = Generation(c, time.perf_counter() - t0)
    elif cam.kind == "retrieval":
        if cam.store is None or len(cam.store) == 0:
            raise CtxAugError("retrieval on an empty store")
        _, c, _ = retrieve(cam.store, embed(cam.embedding, q.description))
        out = Generation(c, time.perf_counter() - t0)
    else:
        v, c, lp = sample_template(cam.policy, features(q, cam.policy.feature_dim - 1), rng)
        out = Generation(c, time.perf_counter() - t0, v, lp)
    return out


__all__ = [
    "CamBackend", "EmbeddingConfig", "Generation", "StoreEntry", "TemplatePolicy", "VectorStore",
    "bucket", "build_vector_store", "embed", "features", "generate", "harvest_templates",
    "library_digest", "log_softmax", "policy_kl", "policy_logprob", "read_template_library",
    "retrieve", "sample_template", "softmax", "tokenize", "write_template_library",
]
