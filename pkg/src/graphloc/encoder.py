"""Graph reasoning layers, node pooling and the attention classifier head.

Drone and satellite graphs go through the same weights.  Each view runs a
spatial branch over ``w_sp`` and a semantic branch over ``w_se``; their node
outputs are averaged and pooled into one embedding per image.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import DEFAULT_THETA, GraphStatic, ProjectionParams, SceneGraph, build_scene_graph
from .params import ParamStore

LAYER_KINDS = ("paper_residual", "gcn", "graphsage", "gat", "transformer_attention")
POOLINGS = ("gem", "gru", "mean")
LEAKY_SLOPE = 0.01
GAT_SLOPE = 0.2


@dataclass
class EncoderConfig:
    layer_kind: str = "transformer_attention"
    layers: int = 2
    heads_layer1: int = 4
    hidden_dim: int = 64
    pooling: str = "gem"
    dropout: float = 0.5
    use_spatial: bool = True
    use_semantic: bool = True
    use_global_node: bool = True
    use_cosine: bool = True
    theta: float = DEFAULT_THETA
    gem_p: float = 3.0
    classifier_heads: int = 4

    def __post_init__(self):
        if self.layer_kind not in LAYER_KINDS:
            raise ValueError(f"layer_kind must be one of {LAYER_KINDS}, got {self.layer_kind!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if not (self.use_spatial or self.use_semantic):
            raise ValueError("at least one of use_spatial / use_semantic must be on")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.hidden_dim % self.heads_layer1 or self.hidden_dim % self.classifier_heads:
            raise ValueError("attention heads must divide hidden_dim")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def heads(self, layer: int) -> int:
        return self.heads_layer1 if layer == 0 else 1

    def branches(self) -> list[str]:
        out = []
        if self.use_spatial:
            out.append("sp")
        if self.use_semantic:
            out.append("se")
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ViewEncoding:
    node_out: Tensor  # fused node features after reasoning
    embedding: Tensor  # (1, D') pooled image embedding
    class_logits: Tensor  # (1, C)
    graph: SceneGraph


# ----------------------------------------------------------------------------
# parameters


def _kaiming(rng, fan_in, shape, slope=LEAKY_SLOPE):
    bound = math.sqrt(6.0 / ((1.0 + slope**2) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


def init_params(feature_dim: int, n_classes: int, cfg: EncoderConfig, seed: int = 2024) -> ParamStore:
    """Fresh parameters with Kaiming-uniform fan-in scaling, seeded."""
    rng = np.random.default_rng(seed)
    H = cfg.hidden_dim
    store = ParamStore()
    store.add("proj.W", _kaiming(rng, feature_dim, (feature_dim, H), slope=1.0))
    store.add("proj.b", np.zeros((1, H)))
    store.add("sem.W_psi", _kaiming(rng, H, (H, H), slope=1.0))
    store.add("sem.W_phi", _kaiming(rng, H, (H, H), slope=1.0))
    for br in cfg.branches():
        for layer in range(cfg.layers):
            pre = f"{br}.{layer}."
            kind = cfg.layer_kind
            if kind == "paper_residual":
                store.add(pre + "W_g", _kaiming(rng, H, (H, H)))
            elif kind == "gcn":
                store.add(pre + "W", _kaiming(rng, H, (H, H)))
            elif kind == "graphsage":
                store.add(pre + "W_self", _kaiming(rng, 2 * H, (H, H)))
                store.add(pre + "W_neigh", _kaiming(rng, 2 * H, (H, H)))
            elif kind == "gat":
                nh = cfg.heads(layer)
                store.add(pre + "W", _kaiming(rng, H, (H, H)))
                store.add(pre + "a_src", _kaiming(rng, H // nh, (nh, H // nh)))
                store.add(pre + "a_dst", _kaiming(rng, H // nh, (nh, H // nh)))
            else:
                for m in ("W_q", "W_k", "W_v"):
                    store.add(pre + m, _kaiming(rng, H, (H, H), slope=1.0))
    if cfg.pooling == "gem":
        store.add("pool.p", np.full((1, 1), float(cfg.gem_p)))
    elif cfg.pooling == "gru":
        b = 1.0 / math.sqrt(H)
        for gate in ("z", "r", "h"):
            store.add(f"pool.W_{gate}", rng.uniform(-b, b, (H, H)))
            store.add(f"pool.U_{gate}", rng.uniform(-b, b, (H, H)))
            store.add(f"pool.b_{gate}", np.zeros((1, H)))
    for m in ("W_q", "W_k", "W_v", "W_o"):
        store.add("cls." + m, _kaiming(rng, H, (H, H), slope=1.0))
    store.add("cls.W_c", _kaiming(rng, H, (H, n_classes), slope=1.0))
    store.add("cls.b_c", np.zeros((1, n_classes)))
    return store


# ----------------------------------------------------------------------------
# reasoning layers


def row_normalize(A: Tensor) -> Tensor:
    """Divide each row by its L1 norm; all-zero rows stay zero."""
    s = ad.sum(ad.abs_(A), axis=1)
    pad = (s.data < 1e-12).astype(np.float64)
    return ad.div(A, ad.add(s, pad))


def _edge_mask(W_adj: Tensor, self_loops: bool) -> np.ndarray:
    mask = W_adj.data != 0
    if self_loops:
        mask = mask | np.eye(mask.shape[0], dtype=bool)
    return mask


def gnn_layer(V: Tensor, W_adj: Tensor, params, kind: str, prefix: str = "", heads: int = 1) -> Tensor:
    """One message-passing update with a residual path and leaky-relu.

    ``params`` maps names (``prefix + "W_g"`` etc.) to tensors.
    """
    N, H = V.shape
    if W_adj.shape != (N, N):
        raise ValueError(f"adjacency {W_adj.shape} does not match {N} nodes")
    P = lambda name: params[prefix + name]  # noqa: E731

    if kind == "paper_residual":
        msg = ad.matmul(row_normalize(W_adj), ad.matmul(V, P("W_g")))
    elif kind == "gcn":
        A = ad.add(W_adj, np.eye(N))
        d = ad.add(ad.sum(ad.abs_(W_adj), axis=1), 1.0)
        dinv = ad.power(d, -0.5)
        A_hat = ad.mul(ad.mul(A, dinv), ad.transpose(dinv))
        msg = ad.matmul(A_hat, ad.matmul(V, P("W")))
    elif kind == "graphsage":
        neigh = ad.matmul(row_normalize(W_adj), V)
        msg = ad.add(ad.matmul(V, P("W_self")), ad.matmul(neigh, P("W_neigh")))
    elif kind == "gat":
        mask = _edge_mask(W_adj, self_loops=True)
        Z = ad.matmul(V, P("W"))
        dh = H // heads
        a_src, a_dst = P("a_src"), P("a_dst")
        outs = []
        for h in range(heads):
            zh = ad.slice_cols(Z, h * dh, (h + 1) * dh)
            es = ad.matmul(zh, ad.transpose(ad.gather_rows(a_src, [h])))
            ed = ad.matmul(zh, ad.transpose(ad.gather_rows(a_dst, [h])))
            logits = ad.leaky_relu(ad.add(es, ad.transpose(ed)), GAT_SLOPE)
            outs.append(ad.matmul(ad.softmax_rows(logits, mask), zh))
        msg = outs[0] if heads == 1 else ad.concat_cols(outs)
    elif kind == "transformer_attention":
        mask = _edge_mask(W_adj, self_loops=True)
        bias = row_normalize(W_adj)
        Q = ad.matmul(V, P("W_q"))
        K = ad.matmul(V, P("W_k"))
        Vv = ad.matmul(V, P("W_v"))
        dh = H // heads
        outs = []
        for h in range(heads):
            sl = (h * dh, (h + 1) * dh)
            qh = ad.slice_cols(Q, *sl) if heads > 1 else Q
            kh = ad.slice_cols(K, *sl) if heads > 1 else K
            vh = ad.slice_cols(Vv, *sl) if heads > 1 else Vv
            logits = ad.add(ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh)), bias)
            outs.append(ad.matmul(ad.softmax_rows(logits, mask), vh))
        msg = outs[0] if heads == 1 else ad.concat_cols(outs)
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    return ad.leaky_relu(ad.add(msg, V), LEAKY_SLOPE)


def run_branch(V, W_adj, store, cfg: EncoderConfig, branch: str, train=False, rng=None) -> Tensor:
    h = V
    for layer in range(cfg.layers):
        if layer > 0:
            h = ad.dropout(h, cfg.dropout, train, rng)
        h = gnn_layer(h, W_adj, store, cfg.layer_kind, f"{branch}.{layer}.", cfg.heads(layer))
    return h


# ----------------------------------------------------------------------------
# pooling and classification


def gru_order(static: GraphStatic) -> np.ndarray:
    """Global node first, then detections by descending confidence (stable)."""
    off = static.det_offset
    det = np.argsort(-static.confidences, kind="stable") + off
    return np.concatenate([np.arange(off), det]).astype(np.int64)


def pool(nodes: Tensor, method: str, params=None, order=None) -> Tensor:
    if nodes.shape[0] < 1:
        raise ValueError("pooling needs at least one node")
    if method == "mean":
        return ad.mean(nodes, axis=0)
    if method == "gem":
        return ad.signed_gem(nodes, params["pool.p"])
    if method == "gru":
        H = nodes.shape[1]
        order = np.arange(nodes.shape[0]) if order is None else order
        P = params
        h = ad.Tensor(np.zeros((1, H)))
        for i in order:
            x = ad.gather_rows(nodes, [int(i)])
            z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, P["pool.W_z"]), ad.matmul(h, P["pool.U_z"])), P["pool.b_z"]))
            r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, P["pool.W_r"]), ad.matmul(h, P["pool.U_r"])), P["pool.b_r"]))
            n = ad.tanh(
                ad.add(ad.add(ad.matmul(x, P["pool.W_h"]), ad.matmul(ad.mul(r, h), P["pool.U_h"])), P["pool.b_h"])
            )
            h = ad.add(ad.mul(ad.sub(1.0, z), n), ad.mul(z, h))
        return h
    raise ValueError(f"unknown pooling {method!r}")


def classify(node_out: Tensor, params, heads: int = 4) -> Tensor:
    """Multi-head self-attention over nodes, mean readout, linear logits."""
    N, H = node_out.shape
    dk = H // heads
    Q = ad.matmul(node_out, params["cls.W_q"])
    K = ad.matmul(node_out, params["cls.W_k"])
    Vv = ad.matmul(node_out, params["cls.W_v"])
    outs = []
    for h in range(heads):
        sl = (h * dk, (h + 1) * dk)
        att = ad.softmax_rows(
            ad.scale(ad.matmul(ad.slice_cols(Q, *sl), ad.transpose(ad.slice_cols(K, *sl))), 1.0 / math.sqrt(dk))
        )
        outs.append(ad.matmul(att, ad.slice_cols(Vv, *sl)))
    mha = ad.matmul(ad.concat_cols(outs) if heads > 1 else outs[0], params["cls.W_o"])
    h_global = ad.mean(mha, axis=0)
    return ad.add(ad.matmul(h_global, params["cls.W_c"]), params["cls.b_c"])


# ----------------------------------------------------------------------------
# full view encoding


def static_graph(record, cfg: EncoderConfig) -> GraphStatic:
    return GraphStatic.from_record(record, cfg.theta, cfg.use_global_node)


def build_graph(record_or_static, store, cfg: EncoderConfig) -> SceneGraph:
    static = (
        record_or_static
        if isinstance(record_or_static, GraphStatic)
        else static_graph(record_or_static, cfg)
    )
    return build_scene_graph(
        static, ProjectionParams.from_store(store), cfg.theta, use_cosine=cfg.use_cosine
    )


def encode_view(graph: SceneGraph, store, cfg: EncoderConfig, train: bool = False, rng=None) -> ViewEncoding:
    outs = []
    if cfg.use_spatial:
        outs.append(run_branch(graph.nodes, graph.w_sp, store, cfg, "sp", train, rng))
    if cfg.use_semantic:
        outs.append(run_branch(graph.nodes, graph.w_se, store, cfg, "se", train, rng))
    fused = outs[0] if len(outs) == 1 else ad.scale(ad.add(outs[0], outs[1]), 0.5)
    order = gru_order(graph.static) if cfg.pooling == "gru" else None
    emb = pool(fused, cfg.pooling, store, order)
    logits = classify(fused, store, cfg.classifier_heads)
    return ViewEncoding(fused, emb, logits, graph)


def encode_record(record_or_static, store, cfg: EncoderConfig, train: bool = False, rng=None) -> ViewEncoding:
    return encode_view(build_graph(record_or_static, store, cfg), store, cfg, train, rng)
