"""Finite-difference check of every layer kind, pooling method and loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import LAYER_KINDS, POOLINGS, EncoderConfig, ViewEncoding, classify, gnn_layer, init_params, pool
from .graph import ProjectionParams, build_scene_graph
from .losses import (
    LossConfig,
    PairBatch,
    circle_loss,
    classification_loss,
    fuse_node_losses,
    primary_node_loss,
    secondary_node_loss,
)
from .synth import SynthConfig, generate

TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def _leaf(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _adjacency(rng, n: int) -> Tensor:
    # dense off-diagonal entries: nudging a structural zero would flip the edge mask
    A = rng.uniform(0.1, 1.0, (n, n)) * rng.choice([-1.0, 1.0], (n, n))
    np.fill_diagonal(A, 0.0)
    A[0, 1:] = A[1:, 0] = 1.0
    return Tensor(A, requires_grad=True)


def _scene_pair(seed: int, dim: int):
    corpus = generate(
        SynthConfig(n_scenes=2, objects_min=3, objects_max=5, drone_views=1, feature_dim=dim, seed=seed)
    )
    sat0, drone0, sat1 = corpus.records[0], corpus.records[1], corpus.records[2]
    return drone0, sat0, sat1


def check_layers(seed: int, n_nodes: int = 6, dim: int = 8) -> list[CheckResult]:
    out = []
    for kind in LAYER_KINDS:
        cfg = EncoderConfig(layer_kind=kind, hidden_dim=dim, heads_layer1=4, classifier_heads=4, dropout=0.0)
        store = init_params(dim, 2, cfg, seed)
        for layer in range(cfg.layers):
            rng = np.random.default_rng([seed, layer])
            V, A = _leaf(rng, (n_nodes, dim)), _adjacency(rng, n_nodes)
            prefix = f"sp.{layer}."
            params = [t for name, t in store.items() if name.startswith(prefix)]
            # random linear readout so every output entry carries gradient
            R = rng.standard_normal((n_nodes, dim))

            def f():
                return ad.sum(ad.mul(gnn_layer(V, A, store, kind, prefix, cfg.heads(layer)), R))

            out.append(CheckResult(f"layer/{kind}/{layer}", seed, ad.grad_check(f, [V, A, *params])))
    return out


def check_pooling(seed: int, n_nodes: int = 6, dim: int = 8) -> list[CheckResult]:
    out = []
    for method in POOLINGS:
        cfg = EncoderConfig(hidden_dim=dim, pooling=method, dropout=0.0)
        store = init_params(dim, 2, cfg, seed)
        rng = np.random.default_rng([seed, 99])
        X = _leaf(rng, (n_nodes, dim))
        params = [t for name, t in store.items() if name.startswith("pool.")]
        order = rng.permutation(n_nodes)
        R = rng.standard_normal((1, dim))

        def f():
            return ad.sum(ad.mul(pool(X, method, store, order), R))

        out.append(CheckResult(f"pool/{method}", seed, ad.grad_check(f, [X, *params])))
    return out


def check_graph_and_head(seed: int, dim: int = 8) -> list[CheckResult]:
    drone, _, _ = _scene_pair(seed, dim)
    cfg = EncoderConfig(hidden_dim=dim, dropout=0.0)
    store = init_params(dim, 3, cfg, seed)
    rng = np.random.default_rng([seed, 5])
    proj = [store[n] for n in ("proj.W", "proj.b", "sem.W_psi", "sem.W_phi")]
    n = drone.n_detections + 1
    R1, R2, R3 = rng.standard_normal((n, n)), rng.standard_normal((n, n)), rng.standard_normal((n, dim))

    def f_graph():
        g = build_scene_graph(drone, ProjectionParams.from_store(store))
        return ad.add(ad.add(ad.sum(ad.mul(g.w_sp, R1)), ad.sum(ad.mul(g.w_se, R2))), ad.sum(ad.mul(g.nodes, R3)))

    X = _leaf(rng, (n, dim))
    head = [t for name, t in store.items() if name.startswith("cls.")]
    Rc = rng.standard_normal((1, 3))

    def f_head():
        return ad.sum(ad.mul(classify(X, store, cfg.classifier_heads), Rc))

    return [
        CheckResult("graph/projection+adjacency", seed, ad.grad_check(f_graph, proj)),
        CheckResult("head/classify", seed, ad.grad_check(f_head, [X, *head])),
    ]


def _encoding(record, store, cfg, rng, dim, n_classes) -> ViewEncoding:
    g = build_scene_graph(record, ProjectionParams.from_store(store))
    return ViewEncoding(
        _leaf(rng, (g.n_nodes, dim)), _leaf(rng, (1, dim)), _leaf(rng, (1, n_classes)), g
    )


def check_losses(seed: int, dim: int = 8) -> list[CheckResult]:
    drone, sat, other = _scene_pair(seed, dim)
    cfg = EncoderConfig(hidden_dim=dim, dropout=0.0)
    store = init_params(dim, 3, cfg, seed)
    rng = np.random.default_rng([seed, 17])
    lc = LossConfig()
    ed = _encoding(drone, store, cfg, rng, dim, 3)
    out = []
    for y, gallery in ((1, sat), (0, other)):
        eg = _encoding(gallery, store, cfg, rng, dim, 3)
        pair = PairBatch(ed, eg, y)
        leaves = [ed.node_out, ed.embedding, eg.node_out, eg.embedding]
        out.append(CheckResult(f"loss/primary_node/y={y}", seed, ad.grad_check(lambda: primary_node_loss(pair, lc)[0], leaves)))
        out.append(CheckResult(f"loss/secondary_node/y={y}", seed, ad.grad_check(lambda: secondary_node_loss(pair, lc), leaves)))
        out.append(CheckResult(f"loss/circle/y={y}", seed, ad.grad_check(lambda: circle_loss(pair, lc), leaves)))
    a, b = _leaf(rng, (1, 1)), _leaf(rng, (1, 1))
    out.append(CheckResult("loss/fuse", seed, ad.grad_check(lambda: fuse_node_losses(ad.abs_(a), ad.abs_(b), lc), [a, b])))
    out.append(
        CheckResult(
            "loss/classification",
            seed,
            ad.grad_check(lambda: classification_loss(ed.class_logits, 1, lc.label_smoothing), [ed.class_logits]),
        )
    )
    return out


def run_suite(seeds=range(5)) -> list[CheckResult]:
    results: list[CheckResult] = []
    for seed in seeds:
        results += check_layers(seed)
        results += check_pooling(seed)
        results += check_graph_and_head(seed)
        results += check_losses(seed)
    return results
