import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from graphloc.encoder import EncoderConfig, init_params
from graphloc.params import CheckpointError
from graphloc.retrieval import (
    EmbeddingIndex,
    EmptyIndexError,
    average_precision,
    average_precision_single,
    build_index,
    evaluate,
    fallback_similarity,
    metrics_from_scores,
    rank_query,
    recall_at_1p,
    recall_at_k,
)
from graphloc.scene import SceneRecord
from graphloc.synth import SynthConfig, generate

from oracles import brute_force_metrics, cos


def _index(vectors, ids=None):
    n = len(vectors)
    ids = ids or [f"img{i}" for i in range(n)]
    return EmbeddingIndex(ids, [f"s{i}" for i in range(n)], np.asarray(vectors, dtype=float))


def test_query_equal_to_entry_ranks_first():
    idx = _index([[1.0, 0.0], [0.3, 0.9], [0.5, 0.5]])
    ranked = rank_query([0.3, 0.9], idx)
    assert ranked[0][0] == "img1" and ranked[0][1] == pytest.approx(1.0, abs=1e-15)


def test_orthogonal_query_falls_back_to_id_order():
    idx = _index([[0, 1.0, 0], [0, 0, 1.0], [0, 1.0, 1.0]], ids=["c", "a", "b"])
    ranked = rank_query([1.0, 0, 0], idx)
    assert [r[0] for r in ranked] == ["a", "b", "c"]
    assert all(r[1] == 0.0 for r in ranked)


def test_random_index_matches_sort_oracle():
    rng = np.random.default_rng(0)
    V, q = rng.standard_normal((5, 4)), rng.standard_normal(4)
    idx = _index(V)
    want = sorted(range(5), key=lambda i: (-cos(q, V[i]), f"img{i}"))
    assert [r[0] for r in rank_query(q, idx)] == [f"img{i}" for i in want]


def test_rank_errors():
    with pytest.raises(EmptyIndexError):
        rank_query([1.0], EmbeddingIndex())
    with pytest.raises(ValueError):
        rank_query([1.0, 2.0, 3.0], _index([[1.0, 0.0]]))


def _store(D=6, H=4):
    return init_params(D, 2, EncoderConfig(hidden_dim=H), 0)


def test_fallback_examples():
    store = _store()
    rng = np.random.default_rng(1)
    g = rng.standard_normal(6)
    a = SceneRecord("s", "drone", "a", g, ())
    assert fallback_similarity(a, a, store) == pytest.approx(1.0, abs=1e-12)
    # zero bias at init makes the projection linear, so negation flips the sign
    b = SceneRecord("s", "satellite", "b", -g, ())
    assert fallback_similarity(a, b, store) == pytest.approx(-1.0, abs=1e-12)
    c = SceneRecord("t", "satellite", "c", rng.standard_normal(6), ())
    W = store["proj.W"].data
    assert fallback_similarity(a, c, store) == pytest.approx(cos(g @ W, c.global_feature @ W), abs=1e-12)


def test_recall_examples():
    assert recall_at_k([1, 1, 1], 1) == 1.0
    assert recall_at_k([6], 5) == 0.0
    assert recall_at_k([1, 3, 7], 5) == pytest.approx(2 / 3)
    assert recall_at_1p([2], 200) == 1.0
    assert recall_at_1p([1], 50) == 1.0
    assert recall_at_1p([5, 11], 1000) == 0.5
    with pytest.raises(ValueError):
        recall_at_1p([1], 0)


def test_ap_examples():
    assert average_precision_single([1]) == 1.0
    assert average_precision_single([4]) == 0.25
    assert average_precision_single([1, 3]) == pytest.approx(5 / 6)
    assert average_precision([[1, 3], 4]) == pytest.approx((5 / 6 + 0.25) / 2)


def _random_case(rng, nq, G, ties):
    scores = rng.integers(0, 4, (nq, G)).astype(float) if ties else rng.standard_normal((nq, G))
    relevant = rng.random((nq, G)) < rng.uniform(0.005, 0.2)
    relevant[np.arange(nq), rng.integers(0, G, nq)] = True
    ids = [f"g{j:04d}" for j in rng.permutation(G)]
    return scores, relevant, ids


def test_metrics_match_brute_force_oracle_exactly():
    rng = np.random.default_rng(2024)
    for trial in range(1000):
        nq, G = int(rng.integers(1, 51)), int(rng.integers(1, 201))
        scores, relevant, ids = _random_case(rng, nq, G, ties=trial % 3 == 0)
        rep = metrics_from_scores(scores, relevant, ids)
        rec, r1p, ap, firsts = brute_force_metrics(scores, relevant, ids)
        assert rep.ranks == firsts
        assert rep.recall_at == rec
        assert rep.r_at_1p == r1p
        assert rep.ap == pytest.approx(ap, rel=1e-12, abs=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.integers(1, 30), st.integers(0, 10**6))
def test_metric_invariants(nq, G, seed):
    rng = np.random.default_rng(seed)
    scores, relevant, ids = _random_case(rng, nq, G, ties=seed % 2 == 0)
    rep = metrics_from_scores(scores, relevant, ids, ks=(1, 5, 10, G))
    vals = [rep.recall_at[k] for k in (1, 5, 10)]
    assert vals == sorted(vals) and rep.recall_at[G] == 1.0
    assert 0 < rep.ap <= 1
    for v in list(rep.recall_at.values()) + [rep.r_at_1p]:
        assert 0 <= v <= 1
    # put every relevant item strictly on top: AP must be exactly 1
    boosted = np.where(relevant, 10.0 + scores, scores)
    assert metrics_from_scores(boosted, relevant, ids).ap == 1.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-10, 10)), st.floats(0.01, 100))
def test_rank_invariant_to_positive_rescaling(V, c):
    q = np.array([1.0, -0.5, 0.25])
    idx = _index(V)
    scaled = _index(V * c)
    assert [r[0] for r in rank_query(q, idx)] == [r[0] for r in rank_query(q, scaled)]


def test_index_file_layout_and_roundtrip():
    idx = EmbeddingIndex(["ab"], ["s"], np.array([[1.5, -2.0]]))
    buf = io.BytesIO()
    idx.write(buf)
    raw = buf.getvalue()
    assert raw[:4] == b"ODGN"
    assert raw[4:16] == b"".join(x.to_bytes(4, "little") for x in (1, 2, 1))
    assert raw[16:20] == (2).to_bytes(4, "little") and raw[20:22] == b"ab"
    assert raw[22:26] == (1).to_bytes(4, "little") and raw[26:27] == b"s"
    assert np.frombuffer(raw[27:], "<f8").tolist() == [1.5, -2.0]
    back = EmbeddingIndex.read(io.BytesIO(raw))
    assert back == idx
    with pytest.raises(CheckpointError):
        EmbeddingIndex.read(io.BytesIO(raw[:-1]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=6), unique=True, max_size=5), st.integers(1, 4), st.integers(0, 1000))
def test_index_roundtrip_byte_exact(ids, dim, seed):
    vecs = np.random.default_rng(seed).standard_normal((len(ids), dim))
    idx = EmbeddingIndex(ids, [i[::-1] for i in ids], vecs)
    a = io.BytesIO()
    idx.write(a)
    back = EmbeddingIndex.read(io.BytesIO(a.getvalue()))
    b = io.BytesIO()
    back.write(b)
    assert a.getvalue() == b.getvalue()


def test_duplicate_image_ids_rejected():
    with pytest.raises(ValueError):
        EmbeddingIndex(["a", "a"], ["s", "t"], np.zeros((2, 2)))


def test_separable_two_scene_case():
    c = generate(SynthConfig(n_scenes=2, drone_views=1, drop_prob=0, center_jitter=0, scale_jitter=0, feature_noise=0, domain_offset=0, feature_dim=8))
    cfg = EncoderConfig(hidden_dim=8)
    store = init_params(8, 2, cfg, 0)
    assert evaluate(c, store, cfg, "d2s").r1 == 1.0
    rep = evaluate(c, store, cfg, "s2d")
    assert rep.r1 == 1.0 and rep.n_queries == 2


def test_evaluate_needs_both_views():
    c = generate(SynthConfig(n_scenes=2, drone_views=0, feature_dim=8))
    cfg = EncoderConfig(hidden_dim=8)
    with pytest.raises(ValueError, match="drone"):
        evaluate(c, init_params(8, 2, cfg, 0), cfg, "d2s")


def test_evaluate_uses_fallback_for_empty_scenes():
    g1, g2 = np.array([1.0, 0, 0, 0]), np.array([0, 1.0, 0, 0])
    recs = [
        SceneRecord("a", "satellite", "a_sat", g1, ()),
        SceneRecord("b", "satellite", "b_sat", g2, ()),
        SceneRecord("a", "drone", "a_d", g1 + 0.01, ()),
        SceneRecord("b", "drone", "b_d", g2 + 0.01, ()),
    ]
    from graphloc.scene import Corpus

    cfg = EncoderConfig(hidden_dim=4)
    store = init_params(4, 2, cfg, 0)
    assert evaluate(Corpus(recs, 4), store, cfg).r1 == 1.0
    idx = build_index(recs[:2], store, cfg)
    assert len(idx) == 2 and idx.dim == 4


def test_evaluate_is_deterministic():
    c = generate(SynthConfig(n_scenes=3, drone_views=1, feature_dim=8))
    cfg = EncoderConfig(hidden_dim=8)
    store = init_params(8, 3, cfg, 0)
    assert evaluate(c, store, cfg).to_json() == evaluate(c, store, cfg).to_json()
    assert math.isfinite(evaluate(c, store, cfg).ap)
