from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxaug.cam import (
    CamBackend,
    EmbeddingConfig,
    TemplatePolicy,
    VectorStore,
    build_vector_store,
    embed,
    features,
    generate,
    harvest_templates,
    policy_kl,
    policy_logprob,
    read_template_library,
    retrieve,
    sample_template,
    write_template_library,
)
from ctxaug.errors import CtxAugError
from ctxaug.records import GuidanceRecord, TaskInstance, decode_records, encode_records


def _fnv_bucket(token: str, dim: int = 256) -> int:
    h = 0xCBF29CE484222325
    for b in token.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) % 2**64
    return h % dim


# --------------------------------------------------------------------------
# embeddings


def test_hashed_embedding_counts_tokens():
    v = embed(EmbeddingConfig(), "Red red, SHIRT")
    expected = np.zeros(256)
    expected[_fnv_bucket("red")] += 2
    expected[_fnv_bucket("shirt")] += 1
    assert np.allclose(v, expected / math.sqrt(5), atol=1e-15)


def test_embedding_without_tokens_fails():
    with pytest.raises(CtxAugError, match="no tokens"):
        embed(EmbeddingConfig(), "!!! ...")


def test_features_append_bias_and_differ_by_color():
    red, blue = features("red shirt"), features("blue shirt")
    assert red.shape == (257,) and red[-1] == 1.0
    assert not np.array_equal(red, blue)


# --------------------------------------------------------------------------
# retrieval


def _oracle_retrieve(vectors, query):
    """First vector with the exactly largest cosine similarity, in rational arithmetic."""
    def key(v):
        dot = sum(Fraction(a) * Fraction(b) for a, b in zip(v, query))
        sq = sum(Fraction(a) ** 2 for a in v)
        return (1 if dot > 0 else -1 if dot < 0 else 0) * dot * dot / sq

    best = None
    for i, v in enumerate(vectors):
        k = key(v)
        if best is None or k > best[1]:
            best = (i, k)
    return best[0]


vec4 = st.lists(st.integers(-3, 3), min_size=4, max_size=4).filter(any)


@given(st.lists(vec4, min_size=1, max_size=12), vec4, st.data())
def test_retrieval_matches_brute_force(vectors, query, data):
    # duplicate some vectors and add scaled copies to force exact ties
    for _ in range(data.draw(st.integers(0, 3))):
        src = vectors[data.draw(st.integers(0, len(vectors) - 1))]
        vectors.append([data.draw(st.integers(1, 3)) * x for x in src])
    store = VectorStore(4)
    for i, v in enumerate(vectors):
        store.add(f"t{i}", np.array(v, dtype=float), f"g{i}")
    task_id, guidance, sim = retrieve(store, np.array(query, dtype=float))
    j = _oracle_retrieve(vectors, query)
    assert task_id == f"t{j}" and guidance == f"g{j}"
    assert -1.0 <= sim <= 1.0


def test_store_rejects_bad_input():
    store = VectorStore(3)
    store.add("a", np.ones(3), "g")
    with pytest.raises(ValueError, match="dimension mismatch"):
        store.add("b", np.ones(4), "g")
    with pytest.raises(ValueError, match="duplicate"):
        store.add("a", np.ones(3), "g")
    with pytest.raises(ValueError, match="non-zero"):
        store.add("c", np.zeros(3), "g")
    with pytest.raises(ValueError, match="dimension mismatch"):
        retrieve(store, np.ones(2))
    with pytest.raises(CtxAugError, match="empty store"):
        retrieve(VectorStore(3), np.ones(3))


def test_store_entries_round_trip():
    store = VectorStore(3)
    store.add("a", np.array([1.0, 2.0, 2.0]), "ga")
    store.add("b", np.array([0.0, 1.0, 0.0]), "gb")
    entries = decode_records(encode_records(store.entries), expect="vector_entry")
    again = VectorStore.from_entries(entries)
    assert np.array_equal(again.matrix, store.matrix)
    assert retrieve(again, np.array([0.0, 1.0, 0.1]))[0] == "b"


def _records():
    tasks = {t: TaskInstance(t, "s", f"find a {t} shirt", "train") for t in ("red", "blue")}
    recs = [GuidanceRecord("red", (0, 1), "pick red", "m", "d"), GuidanceRecord("red", (0, 2), "pick red 2", "m", "d"),
            GuidanceRecord("blue", (1, 2), "pick blue", "m", "d")]
    return tasks, recs


def test_store_has_one_entry_per_subset_unless_collapsed():
    tasks, recs = _records()
    store = build_vector_store(recs, tasks)
    assert [e.task_id for e in store.entries] == ["red:0-1", "red:0-2", "blue:1-2"]
    assert retrieve(store, embed(EmbeddingConfig(), "a red shirt"))[1] == "pick red"
    collapsed = build_vector_store(recs, tasks, collapse=True)
    assert [e.task_id for e in collapsed.entries] == ["red", "blue"]


# --------------------------------------------------------------------------
# template policy


def test_saturated_policy_always_picks_its_template():
    w = np.zeros((3, 4))
    w[-1, 2] = 1000.0
    p = TemplatePolicy(("a", "b", "c", "d"), w)
    rng = np.random.default_rng(0)
    f = np.array([0.0, 0.0, 1.0])
    assert {sample_template(p, f, rng)[0] for _ in range(200)} == {2}


def test_uniform_policy_draws_are_uniform():
    p = TemplatePolicy.uniform(["a", "b", "c", "d"], feature_dim=3)
    f = np.array([1.0, 2.0, 1.0])
    rng = np.random.default_rng(1)
    n = 10000
    draws = [sample_template(p, f, rng) for _ in range(n)]
    counts = np.bincount([d[0] for d in draws], minlength=4)
    sigma = math.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n / 4) <= 3 * sigma)
    assert all(abs(d[2] - math.log(0.25)) <= 1e-12 for d in draws[:50])


def test_logprob_matches_direct_softmax():
    rng = np.random.default_rng(2)
    p = TemplatePolicy(("a", "b", "c"), rng.normal(size=(5, 3)))
    f = rng.normal(size=5)
    z = f @ p.weights
    direct = z - math.log(sum(math.exp(x) for x in z))
    for v in range(3):
        assert abs(policy_logprob(p, f, v) - direct[v]) <= 1e-12
    with pytest.raises(IndexError):
        policy_logprob(p, f, 3)


@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_logits_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    p = TemplatePolicy(("a", "b", "c"), rng.normal(size=(4, 3)))
    f = np.append(rng.normal(size=3), 1.0)
    shifted = p.weights.copy()
    shifted[-1] += shift  # bias row: same offset on every logit
    q = p.with_weights(shifted)
    assert np.allclose(p.probs(f), q.probs(f), atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_kl_nonnegative_and_zero_at_reference(seed):
    rng = np.random.default_rng(seed)
    p = TemplatePolicy(("a", "b", "c"), rng.normal(size=(4, 3)))
    f = rng.normal(size=4)
    assert policy_kl(p, f) == 0.0
    moved = p.with_weights(p.weights + rng.normal(size=(4, 3)))
    assert policy_kl(moved, f) >= 0.0


def test_kl_grows_with_distance_from_uniform_reference():
    rng = np.random.default_rng(3)
    direction = rng.normal(size=(4, 3))
    base = TemplatePolicy.uniform(("a", "b", "c"), feature_dim=4)
    f = rng.normal(size=4)
    kls = [policy_kl(base.with_weights(t * direction), f) for t in (0.0, 0.5, 1.0, 2.0, 4.0)]
    assert kls[0] == 0.0 and all(a < b for a, b in zip(kls, kls[1:]))


def test_policy_invariants():
    with pytest.raises(ValueError, match="at least 2"):
        TemplatePolicy(("a",), np.zeros((3, 1)))
    with pytest.raises(ValueError, match="shape"):
        TemplatePolicy(("a", "b"), np.zeros((3, 3)))
    with pytest.raises(ValueError, match="finite"):
        TemplatePolicy(("a", "b"), np.full((3, 2), np.nan))
    p = TemplatePolicy.uniform(("a", "b"), 3)
    with pytest.raises(ValueError):
        p.reference[0, 0] = 1.0


# --------------------------------------------------------------------------
# template library


def test_harvest_ranks_by_frequency_then_first_seen():
    recs = [GuidanceRecord("t", (i,), g, "m", "d") for i, g in enumerate(["b", "a", "a  ", "c", "b", "c", "d"])]
    assert harvest_templates(recs, top_n=3) == ["b", "a", "c"]


def test_library_round_trip(tmp_path):
    lib = ["first snippet", "second\n  snippet"]
    write_template_library(lib, tmp_path / "lib.txt")
    assert read_template_library(tmp_path / "lib.txt") == ["first snippet", "second snippet"]


# --------------------------------------------------------------------------
# generation


def test_generate_kinds():
    task = TaskInstance("t", "s", "find a red shirt", "test")
    rng = np.random.default_rng(0)
    none = generate(CamBackend("none"), task, rng)
    assert none.guidance is None and none.latency is None

    store = VectorStore(256)
    store.add("only", embed(EmbeddingConfig(), "blue jacket"), "the only guidance")
    got = generate(CamBackend("retrieval", store=store), task, rng)
    assert got.guidance == "the only guidance" and got.latency > 0

    policy = TemplatePolicy.uniform(("x", "y"))
    got = generate(CamBackend("template_policy", policy=policy), task, rng)
    assert got.guidance in ("x", "y") and abs(got.logprob - math.log(0.5)) <= 1e-12 and got.latency > 0


def test_generate_errors():
    task = TaskInstance("t", "s", "find a red shirt", "test")
    with pytest.raises(CtxAugError, match="empty store"):
        generate(CamBackend("retrieval", store=VectorStore(256)), task, np.random.default_rng(0))
    with pytest.raises(ValueError, match="missing"):
        CamBackend("template_policy")
    with pytest.raises(ValueError, match="unknown"):
        CamBackend("oracle")
