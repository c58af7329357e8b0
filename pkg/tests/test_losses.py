import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphloc.autodiff import Tensor
from graphloc.encoder import ViewEncoding
from graphloc.graph import GraphStatic, SceneGraph
from graphloc.losses import (
    LossConfig,
    PairBatch,
    circle_from_similarity,
    circle_loss,
    classification_loss,
    fuse_node_losses,
    global_local_similarity,
    overlap_counts,
    overlap_weight,
    overlap_weight_from_counts,
    primary_node_loss,
    secondary_confidence,
    secondary_matches,
    secondary_node_loss,
)
from graphloc.scene import BBox, Detection, SceneRecord

from oracles import cos

CFG = LossConfig()


def _graph(boxes, classes, confs, nodes):
    dets = tuple(Detection(BBox(*b), c, f, (0.0,)) for b, c, f in zip(boxes, classes, confs))
    static = GraphStatic.from_record(SceneRecord("s", "drone", "i", np.zeros(1), dets))
    N = static.n_nodes
    return SceneGraph(Tensor(np.zeros((N, 1))), Tensor(np.zeros((N, N))), Tensor(np.zeros((N, N))), static), Tensor(nodes)


def _enc(boxes, classes, confs, nodes, emb=None):
    g, nodes = _graph(boxes, classes, confs, nodes)
    emb = Tensor(nodes.data.mean(axis=0, keepdims=True)) if emb is None else Tensor(emb)
    return ViewEncoding(nodes, emb, Tensor(np.zeros((1, 2))), g)


def test_primary_identical_positive():
    v = np.array([[1.0, 2.0, 0.5]])
    e = _enc([], [], [], v)
    L, s, w = primary_node_loss(PairBatch(e, e, 1), CFG)
    assert s.item() == pytest.approx(10.0, abs=1e-12) and w == 1.0
    assert L.item() == pytest.approx(-math.log(1 / (1 + math.exp(-10))), rel=1e-9)
    assert L.item() == pytest.approx(4.54e-5, rel=1e-3)


def test_primary_orthogonal_negative_is_log2_times_weight():
    a = _enc([(0, 0, 0.1, 0.1)], [0], [0.64], np.array([[1.0, 0.0], [0.3, 0.3]]))
    b = _enc([(0, 0, 0.1, 0.1)], [0], [1.0], np.array([[0.0, 1.0], [0.3, 0.3]]))
    L, s, w = primary_node_loss(PairBatch(a, b, 0), CFG)
    assert s.item() == 0.0 and w == pytest.approx(0.8)
    assert L.item() == pytest.approx(0.8 * math.log(2), abs=1e-12)


def test_secondary_match_examples():
    g1, _ = _graph([(0.1, 0.1, 0.3, 0.3)], [2], [1.0], np.zeros((2, 1)))
    same, _ = _graph([(0.1, 0.1, 0.3, 0.3)], [2], [1.0], np.zeros((2, 1)))
    other_cls, _ = _graph([(0.1, 0.1, 0.3, 0.3)], [3], [1.0], np.zeros((2, 1)))
    far, _ = _graph([(0.3, 0.1, 0.5, 0.3)], [2], [1.0], np.zeros((2, 1)))
    assert secondary_matches(g1, same, CFG).labels[0, 0] == 1
    assert secondary_matches(g1, other_cls, CFG).labels[0, 0] == 0
    assert secondary_matches(g1, far, CFG).labels[0, 0] == 0


def test_secondary_confidence_examples():
    a, _ = _graph([(0.1, 0.1, 0.3, 0.3)], [0], [1.0], np.zeros((2, 1)))
    assert secondary_confidence(a, a, CFG)[0, 0] == 1.0
    b, _ = _graph([(0.1, 0.1, 0.3, 0.3)], [0], [0.5], np.zeros((2, 1)))
    c, _ = _graph([(0.1, 0.1, 0.3, 0.3)], [0], [0.9], np.zeros((2, 1)))
    assert secondary_confidence(b, c, CFG)[0, 0] == 0.5
    d, _ = _graph([(0.3, 0.1, 0.5, 0.3)], [0], [1.0], np.zeros((2, 1)))
    assert secondary_confidence(a, d, CFG)[0, 0] == pytest.approx(math.exp(-1), abs=1e-12)
    e, _ = _graph([], [], [], np.zeros((1, 1)))
    assert secondary_confidence(a, e, CFG).shape == (1, 0)


def test_secondary_loss_empty_is_zero():
    e = _enc([], [], [], np.ones((1, 2)))
    f = _enc([(0, 0, 0.1, 0.1)], [0], [1.0], np.ones((2, 2)))
    assert secondary_node_loss(PairBatch(e, f, 1), CFG).item() == 0.0


def test_secondary_loss_saturates_on_perfect_match():
    box = (0.2, 0.2, 0.4, 0.4)
    e = _enc([box], [1], [1.0], np.array([[0.0, 0.0], [1.0, 0.0]]))
    cfg = LossConfig(tau=0.01)
    # reaches the log clamp floor
    assert secondary_node_loss(PairBatch(e, e, 1), cfg).item() <= 1.0001e-12


def test_secondary_loss_two_by_two_loop_oracle():
    rng = np.random.default_rng(0)
    boxes_a = [(0.1, 0.1, 0.3, 0.3), (0.5, 0.5, 0.7, 0.8)]
    boxes_b = [(0.12, 0.1, 0.3, 0.32), (0.6, 0.5, 0.7, 0.7)]
    na, nb = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    a = _enc(boxes_a, [1, 2], [0.9, 0.7], na)
    b = _enc(boxes_b, [1, 2], [0.8, 0.95], nb)
    num = den = 0.0
    for i in range(2):
        for j in range(2):
            ca = ((boxes_a[i][0] + boxes_a[i][2]) / 2, (boxes_a[i][1] + boxes_a[i][3]) / 2)
            cb = ((boxes_b[j][0] + boxes_b[j][2]) / 2, (boxes_b[j][1] + boxes_b[j][3]) / 2)
            d = math.dist(ca, cb)
            w = min([0.9, 0.7][i], [0.8, 0.95][j]) * math.exp(-5 * d)
            y = 1.0 if (d <= 0.1 and i == j) else 0.0
            s = cos(na[i + 1], nb[j + 1]) / 0.1
            p = 1 / (1 + math.exp(-s))
            num += -w * (y * math.log(p) + (1 - y) * math.log(1 - p))
            den += w
    assert secondary_node_loss(PairBatch(a, b, 1), CFG).item() == pytest.approx(num / den, abs=1e-10)


def test_fuse_examples():
    assert fuse_node_losses(Tensor([[0.7]]), Tensor([[0.7]]), CFG).item() == pytest.approx(0.7, abs=1e-15)
    assert fuse_node_losses(Tensor([[2.0]]), Tensor([[1.0]]), LossConfig(eta=0.0)).item() == 1.5
    expected = 2 / (1 + math.exp(-1)) + math.exp(-1) / (1 + math.exp(-1))
    assert fuse_node_losses(Tensor([[2.0]]), Tensor([[1.0]]), CFG).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(1.7311, abs=1e-4)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50), st.floats(0, 10))
def test_fuse_lies_between_inputs(a, b, eta):
    v = fuse_node_losses(Tensor([[a]]), Tensor([[b]]), LossConfig(eta=eta)).item()
    assert min(a, b) - 1e-9 <= v <= max(a, b) + 1e-9


def test_global_local_similarity_examples():
    rng = np.random.default_rng(1)
    nodes = rng.standard_normal((3, 4))
    e = _enc([(0, 0, 0.2, 0.2), (0.4, 0.4, 0.6, 0.6)], [0, 1], [1, 1], nodes)
    S_g, S_l = global_local_similarity(PairBatch(e, e, 1))
    assert S_g.item() == pytest.approx(1.0, abs=1e-12) and S_l.item() == pytest.approx(1.0, abs=1e-12)
    a = _enc([(0, 0, 0.2, 0.2)], [0], [1], np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]))
    b = _enc([(0, 0, 0.2, 0.2)], [0], [1], np.array([[0, 0, 1.0, 0], [0, 0, 0, 1.0]]))
    S_g, S_l = global_local_similarity(PairBatch(a, b, 0))
    assert S_g.item() == 0.0 and S_l.item() == 0.0


def test_local_similarity_brute_force():
    rng = np.random.default_rng(2)
    na, nb = rng.standard_normal((3, 5)), rng.standard_normal((4, 5))
    a = _enc([(0, 0, 0.2, 0.2), (0.3, 0.3, 0.5, 0.5)], [0, 1], [1, 1], na)
    b = _enc([(0, 0, 0.2, 0.2), (0.3, 0.3, 0.5, 0.5), (0.6, 0.6, 0.9, 0.9)], [0, 1, 2], [1, 1, 1], nb)
    _, S_l = global_local_similarity(PairBatch(a, b, 1))
    want = sum(max(cos(na[i], nb[j]) for j in (1, 2, 3)) for i in (1, 2)) / 2
    assert S_l.item() == pytest.approx(want, abs=1e-10)


def test_overlap_weight_examples():
    boxes = [(0.1, 0.1, 0.3, 0.3), (0.5, 0.5, 0.7, 0.7), (0.1, 0.6, 0.2, 0.9)]
    e = _enc(boxes, [0, 1, 2], [1, 1, 1], np.ones((4, 2)))
    assert overlap_counts(e.graph, e.graph, CFG) == (3, 3, 3, 1.0)
    assert overlap_weight(PairBatch(e, e, 1), CFG) == pytest.approx(0.75, abs=1e-12)
    f = _enc([(0.8, 0.8, 0.9, 0.9)], [5], [1], np.ones((2, 2)))
    assert overlap_weight(PairBatch(e, f, 1), CFG) == 0.0
    assert overlap_weight_from_counts(2, 3, 4, 0.5) == pytest.approx(2 / 7 * 4 / 3, abs=1e-15)
    assert overlap_weight_from_counts(0, 0, 0, 0.0) == 0.5


def test_circle_examples():
    assert circle_from_similarity(Tensor([[1.5]]), 1, 0.6, CFG).item() == pytest.approx(math.log(2), abs=1e-15)
    assert circle_from_similarity(Tensor([[-0.5]]), 0, 1.0, CFG).item() == pytest.approx(math.log(2), abs=1e-15)
    v = circle_from_similarity(Tensor([[2.0]]), 1, 0.75, CFG).item()
    assert v == pytest.approx(math.log1p(math.exp(-6)), rel=1e-12)
    assert v == pytest.approx(2.476e-3, rel=1e-3)


def test_circle_loss_is_stable_for_extreme_similarity():
    assert math.isfinite(circle_from_similarity(Tensor([[-1e4]]), 1, 1.0, CFG).item())
    assert circle_from_similarity(Tensor([[1e4]]), 1, 1.0, CFG).item() == 0.0


def test_circle_monotone_on_grid():
    grid = np.linspace(-2, 2, 81)
    pos = [circle_from_similarity(Tensor([[s]]), 1, 0.5, CFG).item() for s in grid]
    neg = [circle_from_similarity(Tensor([[s]]), 0, 1.0, CFG).item() for s in grid]
    assert all(a >= b for a, b in zip(pos, pos[1:]))
    assert all(a <= b for a, b in zip(neg, neg[1:]))


def test_classification_examples():
    perfect = Tensor([[200.0, 0.0, 0.0, 0.0]])
    assert classification_loss(perfect, 0, 0.1).item() < 1e-9
    uniform = Tensor(np.zeros((1, 4)))
    want = -math.log(0.25) - 0.1 * 3 * math.log(0.75)
    assert classification_loss(uniform, 0, 0.1).item() == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(1.4726, abs=1e-4)
    logits = np.random.default_rng(3).standard_normal((1, 5))
    p = np.exp(logits) / np.exp(logits).sum()
    assert classification_loss(Tensor(logits), 2, 0.0).item() == pytest.approx(-math.log(p[0, 2]), abs=1e-12)
    with pytest.raises(ValueError):
        classification_loss(Tensor([[1.0]]), 0)


@st.composite
def scene_pair(draw):
    def side(k):
        lo = draw(st.lists(st.tuples(st.floats(0, 0.7), st.floats(0, 0.7)), min_size=k, max_size=k))
        return [(x, y, x + 0.1, y + 0.1) for x, y in lo], draw(st.lists(st.integers(0, 2), min_size=k, max_size=k))

    m, n = draw(st.integers(0, 4)), draw(st.integers(0, 4))
    return side(m), side(n), draw(st.integers(0, 10**6)), draw(st.integers(0, 1))


@settings(max_examples=80, deadline=None)
@given(scene_pair())
def test_losses_nonnegative_finite_and_matches_symmetric(data):
    (ba, ca), (bb, cb), seed, y = data
    rng = np.random.default_rng(seed)
    a = _enc(ba, ca, rng.uniform(0.5, 1, len(ba)), rng.standard_normal((len(ba) + 1, 3)))
    b = _enc(bb, cb, rng.uniform(0.5, 1, len(bb)), rng.standard_normal((len(bb) + 1, 3)))
    pair = PairBatch(a, b, y)
    for v in (primary_node_loss(pair, CFG)[0], secondary_node_loss(pair, CFG), circle_loss(pair, CFG)):
        assert math.isfinite(v.item()) and v.item() >= 0
    np.testing.assert_array_equal(secondary_matches(a.graph, b.graph, CFG).labels, secondary_matches(b.graph, a.graph, CFG).labels.T)
    np.testing.assert_array_equal(secondary_confidence(a.graph, b.graph, CFG), secondary_confidence(b.graph, a.graph, CFG).T)
