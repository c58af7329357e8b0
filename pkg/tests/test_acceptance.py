"""End-to-end acceptance checks.

Each test prints one ``PASS``/``FAIL`` line (visible with ``pytest -s`` or in
the ``-v`` report's captured output) before asserting at the stated tolerance.
"""
import io
import time
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest

from graphloc import gradcheck
from graphloc.encoder import LAYER_KINDS, POOLINGS, EncoderConfig, init_params
from graphloc.geometry import ciou, iou
from graphloc.losses import LossConfig, circle_from_similarity, classification_loss, fuse_node_losses
from graphloc.autodiff import Tensor
from graphloc.params import read_checkpoint, write_checkpoint
from graphloc.retrieval import EmbeddingIndex, build_index, evaluate, metrics_from_scores
from graphloc.scene import Corpus
from graphloc.synth import SynthConfig, generate
from graphloc.trainer import TrainConfig, normalize_weights, train, update_weights

from oracles import brute_force_metrics

ENCODER = EncoderConfig(layer_kind="paper_residual", hidden_dim=64)
TRAINING = TrainConfig(epochs=100, lr=3e-3, val_fraction=0.0)
HELD_OUT_VIEW = "_3"
# one held-out query is worth 0.02 R@1, the same as the ablation tolerance, so
# ablation comparisons average several training seeds
ABLATION_SEEDS = (2024, 1, 2)


def report(n, ok, detail):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


@lru_cache(maxsize=None)
def corpus_split():
    c = generate(SynthConfig())
    held = lambda r: r.view == "drone" and r.image_id.endswith(HELD_OUT_VIEW)
    queries = [r for r in c.records if held(r)]
    train_corpus = Corpus([r for r in c.records if not held(r)], c.feature_dim)
    return train_corpus, queries, c.by_view("satellite")


def trained(seed=TRAINING.seed, **overrides):
    return _trained(seed, tuple(sorted(overrides.items())))


@lru_cache(maxsize=None)
def _trained(seed, overrides):
    overrides = dict(overrides)
    enc = replace(ENCODER, **{k: v for k, v in overrides.items() if k.startswith("use_") and not k.startswith("use_loss")})
    tc = replace(TRAINING, seed=seed, **{k: v for k, v in overrides.items() if k.startswith("use_loss")})
    train_corpus, queries, sats = corpus_split()
    t0 = time.perf_counter()
    res = train(train_corpus, enc, LossConfig(), tc)
    elapsed = time.perf_counter() - t0
    r1 = evaluate(None, res.store, enc, "d2s", queries=queries, gallery=sats).r1
    return res, enc, r1, elapsed


def test_gradient_checks():
    t0 = time.perf_counter()
    results = gradcheck.run_suite(range(5))
    elapsed = time.perf_counter() - t0
    names = {r.name for r in results}
    covered = all(any(k in n for n in names) for k in LAYER_KINDS + POOLINGS) and sum("loss/" in n for n in names) >= 5
    worst = max(r.error for r in results)
    ok = covered and worst < 1e-4 and elapsed < 60 and {r.seed for r in results} == set(range(5))
    report(1, ok, f"{len(results)} checks, max rel error {worst:.2e}, {elapsed:.1f}s")
    assert covered
    assert worst < 1e-4
    assert elapsed < 60


def test_metrics_match_oracle():
    rng = np.random.default_rng(7)
    mismatches = 0
    for trial in range(1000):
        nq, G = int(rng.integers(1, 51)), int(rng.integers(1, 201))
        scores = rng.integers(0, 5, (nq, G)).astype(float) if trial % 2 else rng.standard_normal((nq, G))
        relevant = rng.random((nq, G)) < 0.05
        relevant[np.arange(nq), rng.integers(0, G, nq)] = True
        ids = [f"g{j:04d}" for j in rng.permutation(G)]
        rep = metrics_from_scores(scores, relevant, ids)
        rec, r1p, ap, _ = brute_force_metrics(scores, relevant, ids)
        mismatches += rep.recall_at != rec or rep.r_at_1p != r1p or abs(rep.ap - ap) > 1e-12 * max(1, ap)
    report(2, mismatches == 0, f"{mismatches} mismatches over 1000 matrices")
    assert mismatches == 0


@pytest.mark.slow
def test_end_to_end_retrieval():
    res, enc, r1, elapsed = trained()
    train_corpus, queries, sats = corpus_split()
    untrained = init_params(train_corpus.feature_dim, len(res.classes), enc, TRAINING.seed)
    r1_init = evaluate(None, untrained, enc, "d2s", queries=queries, gallery=sats).r1
    ok = r1 >= 0.90 and r1_init <= 0.20 and elapsed < 300
    report(3, ok, f"trained R@1 {r1:.3f}, untrained R@1 {r1_init:.3f}, training {elapsed:.0f}s")
    assert r1 >= 0.90
    assert r1_init <= 0.20
    assert elapsed < 300


@pytest.mark.slow
def test_ablations():
    mean_r1 = lambda **kw: float(np.mean([trained(seed=s, **kw)[2] for s in ABLATION_SEEDS]))
    full = mean_r1()
    no_sem = mean_r1(use_semantic=False)
    no_node = mean_r1(use_loss_node=False)
    no_m = mean_r1(use_loss_m=False)
    checks = [full >= no_sem - 0.02, full >= no_node - 0.02, full - no_m >= 0.10]
    report(4, all(checks), f"mean over seeds {ABLATION_SEEDS}: full {full:.3f}, w/o semantic {no_sem:.3f}, w/o node loss {no_node:.3f}, w/o L_M {no_m:.3f}")
    assert checks[0], "semantic graph should not hurt"
    assert checks[1], "node loss should not hurt"
    assert checks[2], "removing L_M should cost at least 0.10 R@1"


@pytest.mark.slow
def test_dynamic_weights():
    lam = normalize_weights((3, 2, 2))
    init_ok = np.allclose(lam, (3 / 7, 2 / 7, 2 / 7), atol=1e-15, rtol=0)
    rng = np.random.default_rng(0)
    worst, positive = 0.0, True
    for _ in range(10_000):
        lam = update_weights(lam, rng.uniform(-2, 2, 3))
        worst = max(worst, abs(lam.sum() - 1))
        positive &= bool((lam > 0).all())
    # and along the trace of the acceptance training run
    for rec in trained()[0].trace:
        worst = max(worst, abs(sum(rec["lambda"]) - 1))
        positive &= all(x > 0 for x in rec["lambda"])
    ok = init_ok and worst <= 1e-12 and positive
    report(5, ok, f"init {init_ok}, max |sum-1| {worst:.1e} over 10000 updates, positive {positive}")
    assert init_ok and positive
    assert worst <= 1e-12


def test_loss_identities():
    cfg = LossConfig()
    fuse_err = max(
        abs(fuse_node_losses(Tensor([[v]]), Tensor([[v]]), cfg).item() - v) for v in (0.0, 0.3, 1.7, 25.0)
    )
    circle_pos = circle_from_similarity(Tensor([[cfg.m_p]]), 1, 0.8, cfg).item()
    circle_neg = circle_from_similarity(Tensor([[cfg.m_n]]), 0, 1.0, cfg).item()
    circle_err = max(abs(circle_pos - np.log(2)), abs(circle_neg - np.log(2)))
    cls = classification_loss(Tensor([[300.0, 0.0, 0.0, 0.0, 0.0]]), 0, cfg.label_smoothing).item()
    ok = fuse_err <= 1e-12 and circle_err <= 1e-12 and cls < 1e-9
    report(6, ok, f"fuse err {fuse_err:.1e}, circle err {circle_err:.1e}, perfect cls loss {cls:.1e}")
    assert fuse_err <= 1e-12
    assert circle_err <= 1e-12
    assert cls < 1e-9


def test_determinism_and_roundtrips():
    c = generate(SynthConfig(n_scenes=10))
    tc = replace(TRAINING, epochs=3)
    a = train(c, ENCODER, LossConfig(), tc)
    b = train(c, ENCODER, LossConfig(), tc)
    same_trace = a.trace_jsonl() == b.trace_jsonl()
    buf = io.BytesIO()
    write_checkpoint(a.store, buf)
    again = io.BytesIO()
    write_checkpoint(read_checkpoint(io.BytesIO(buf.getvalue())), again)
    ckpt_ok = buf.getvalue() == again.getvalue()
    idx = build_index(c.by_view("satellite"), a.store, ENCODER)
    ib = io.BytesIO()
    idx.write(ib)
    ib2 = io.BytesIO()
    EmbeddingIndex.read(io.BytesIO(ib.getvalue())).write(ib2)
    idx_ok = ib.getvalue() == ib2.getvalue()
    report(7, same_trace and ckpt_ok and idx_ok, f"trace {same_trace}, checkpoint {ckpt_ok}, index {idx_ok}")
    assert same_trace and ckpt_ok and idx_ok


def test_fuzzed_boxes():
    rng = np.random.default_rng(11)
    xy = rng.uniform(0, 1, (10_000, 2, 2))
    wh = rng.uniform(1e-3, 0.5, (10_000, 2, 2))
    boxes = np.concatenate([xy, xy + wh], axis=2)
    bad_bound = bad_sym = 0
    worst_self = 0.0
    for a, b in boxes:
        c_ab, c_ba = ciou(a, b), ciou(b, a)
        bad_bound += c_ab > iou(a, b)
        bad_sym += abs(c_ab - c_ba) > 1e-12
        worst_self = max(worst_self, abs(ciou(a, a) - 1.0))
    ok = bad_bound == 0 and bad_sym == 0 and worst_self <= 1e-12
    report(8, ok, f"{bad_bound} bound violations, {bad_sym} asymmetric, max |ciou(a,a)-1| {worst_self:.1e}")
    assert ok
