"""Training objectives for a drone/satellite pair.

* node matching: primary (global node) and secondary (detection node) BCE,
  fused with a loss-dependent sigmoid weight;
* overlap-weighted circle loss on global + local cosine similarity;
* label-smoothed scene classification.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import ViewEncoding
from .geometry import center_distance_matrix, ciou_matrix
from .graph import SceneGraph

LOG_CLAMP = 1e-12


@dataclass
class LossConfig:
    tau: float = 0.1
    epsilon_geo: float = 0.1
    beta: float = 5.0
    eta: float = 1.0
    gamma: float = 16.0
    m_p: float = 1.5
    m_n: float = -0.5
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.epsilon_geo < 0:
            raise ValueError("epsilon_geo must be non-negative")
        if not self.m_p > self.m_n:
            raise ValueError("m_p must exceed m_n")


@dataclass
class PairBatch:
    drone: ViewEncoding
    satellite: ViewEncoding
    y: int  # 1 when both views show the same scene
    class_index: int = -1


def _const(x: float) -> Tensor:
    return Tensor(np.array([[float(x)]]))


def _bce(logit: Tensor, y) -> Tensor:
    """Elementwise ``-(y log s + (1-y) log(1-s))`` with ``s = sigmoid(logit)``."""
    p = ad.clip(ad.sigmoid(logit), LOG_CLAMP, 1.0 - LOG_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    pos = ad.mul(ad.log(p), y)
    neg = ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - y)
    return ad.scale(ad.add(pos, neg), -1.0)


def view_confidence(graph: SceneGraph) -> float:
    c = graph.confidences
    return float(c.mean()) if c.size else 1.0


def primary_feature(enc: ViewEncoding) -> Tensor:
    """Post-reasoning global-node row, or the node mean when there is none."""
    if enc.graph.has_global:
        return ad.gather_rows(enc.node_out, [0])
    return ad.mean(enc.node_out, axis=0)


def local_features(enc: ViewEncoding) -> Tensor | None:
    g = enc.graph
    if g.n_detections == 0:
        return None
    off = g.static.det_offset
    return ad.gather_rows(enc.node_out, np.arange(off, off + g.n_detections))


def primary_node_loss(pair: PairBatch, cfg: LossConfig):
    """Return ``(L_main, s_global, w_global)``."""
    s = ad.scale(ad.cosine_rows(primary_feature(pair.drone), primary_feature(pair.satellite)), 1.0 / cfg.tau)
    w = math.sqrt(view_confidence(pair.drone.graph) * view_confidence(pair.satellite.graph))
    return ad.scale(_bce(s, pair.y), w), s, w


@dataclass
class Matches:
    labels: np.ndarray  # (m, n) 1.0 where both constraints hold
    geometric: np.ndarray  # (m, n) bool, centre distance <= epsilon
    semantic: np.ndarray  # (m, n) bool, same class


def secondary_matches(drone: SceneGraph, satellite: SceneGraph, cfg: LossConfig) -> Matches:
    dist = center_distance_matrix(drone.boxes, satellite.boxes)
    geo = dist <= cfg.epsilon_geo
    sem = drone.class_ids[:, None] == satellite.class_ids[None, :]
    return Matches((geo & sem).astype(np.float64), geo, sem)


def secondary_confidence(drone: SceneGraph, satellite: SceneGraph, cfg: LossConfig) -> np.ndarray:
    if drone.n_detections == 0 or satellite.n_detections == 0:
        return np.zeros((drone.n_detections, satellite.n_detections))
    cmin = np.minimum(drone.confidences[:, None], satellite.confidences[None, :])
    return cmin * np.exp(-cfg.beta * center_distance_matrix(drone.boxes, satellite.boxes))


def secondary_similarity(pair: PairBatch, cfg: LossConfig) -> Tensor | None:
    a, b = local_features(pair.drone), local_features(pair.satellite)
    if a is None or b is None:
        return None
    return ad.scale(ad.cosine_matrix(a, b), 1.0 / cfg.tau)


def secondary_node_loss(pair: PairBatch, cfg: LossConfig) -> Tensor:
    """Confidence-weighted BCE over all detection pairs, normalised by the weight mass.

    Pairs from different scenes (``y = 0``) carry no true correspondences, so
    every label is 0 for them.
    """
    W = secondary_confidence(pair.drone.graph, pair.satellite.graph, cfg)
    total = W.sum()
    if W.size == 0 or total < 1e-12:
        return _const(0.0)
    labels = secondary_matches(pair.drone.graph, pair.satellite.graph, cfg).labels
    if not pair.y:
        labels = np.zeros_like(labels)
    s = secondary_similarity(pair, cfg)
    return ad.scale(ad.sum(ad.mul(_bce(s, labels), W)), 1.0 / total)


def fuse_node_losses(L_main, L_sub, cfg: LossConfig) -> Tensor:
    """Blend the two node losses with weights ``sigmoid(eta * (L_main - L_sub))`` and its complement."""
    L_main, L_sub = ad.as_tensor(L_main), ad.as_tensor(L_sub)
    w = ad.sigmoid(ad.scale(ad.sub(L_main, L_sub), cfg.eta))
    return ad.add(ad.mul(w, L_main), ad.mul(ad.sub(1.0, w), L_sub))


def global_local_similarity(pair: PairBatch):
    """Return ``(S_g, S_l)`` as ``(1, 1)`` tensors."""
    S_g = ad.cosine_rows(pair.drone.embedding, pair.satellite.embedding)
    a, b = local_features(pair.drone), local_features(pair.satellite)
    if a is None or b is None:
        return S_g, _const(0.0)
    S_l = ad.mean(ad.max_over(ad.cosine_matrix(a, b), axis=1))
    return S_g, S_l


def overlap_counts(drone: SceneGraph, satellite: SceneGraph, cfg: LossConfig):
    """``(T_common, T_uav, T_sat, iou_global)`` under the match constraints."""
    m, n = drone.n_detections, satellite.n_detections
    if m == 0 or n == 0:
        return 0, m, n, 0.0
    labels = secondary_matches(drone, satellite, cfg).labels.astype(bool)
    common = min(int(labels.any(axis=1).sum()), m, n)
    if labels.any():
        c = ciou_matrix(drone.boxes, satellite.boxes)[labels]
        iou_global = float(np.clip(c, 0.0, 1.0).mean())
    else:
        iou_global = 0.0
    return common, m, n, iou_global


def overlap_weight_from_counts(t_common, t_uav, t_sat, iou_global) -> float:
    if t_uav + t_sat == 0:
        return 0.5
    return t_common / (t_uav + t_sat) * (1.0 + iou_global / (1.0 + iou_global))


def overlap_weight(pair: PairBatch, cfg: LossConfig | None = None) -> float:
    cfg = cfg or LossConfig()
    return overlap_weight_from_counts(*overlap_counts(pair.drone.graph, pair.satellite.graph, cfg))


def circle_from_similarity(S, y: int, w_o: float, cfg: LossConfig) -> Tensor:
    """Overlap-weighted circle loss for a summed similarity ``S = S_g + S_l``."""
    S = ad.as_tensor(S)
    if y:
        return ad.softplus(ad.scale(ad.sub(S, cfg.m_p), -cfg.gamma * w_o))
    return ad.softplus(ad.scale(ad.sub(S, cfg.m_n), cfg.gamma))


def circle_loss(pair: PairBatch, cfg: LossConfig) -> Tensor:
    S_g, S_l = global_local_similarity(pair)
    w_o = overlap_weight(pair, cfg) if pair.y else 1.0
    return circle_from_similarity(ad.add(S_g, S_l), pair.y, w_o, cfg)


def classification_loss(logits, class_index: int, eps_ls: float = 0.1) -> Tensor:
    """``-sum_c [y_c log p_c + eps (1 - y_c) log(1 - p_c)]`` with ``p = softmax(logits)``."""
    logits = ad.as_tensor(logits)
    C = logits.shape[1]
    if C < 2:
        raise ValueError("classification needs at least two classes")
    y = np.zeros((1, C))
    y[0, class_index] = 1.0
    p = ad.clip(ad.softmax_rows(logits), LOG_CLAMP, 1.0 - LOG_CLAMP)
    pos = ad.mul(ad.log(p), y)
    neg = ad.mul(ad.log(ad.sub(1.0, p)), eps_ls * (1.0 - y))
    return ad.scale(ad.sum(ad.add(pos, neg)), -1.0)


@dataclass
class PairLosses:
    node: Tensor
    main: Tensor
    sub: Tensor
    embed: Tensor
    cls: Tensor


def pair_losses(pair: PairBatch, cfg: LossConfig, with_cls: bool = True) -> PairLosses:
    L_main, _, _ = primary_node_loss(pair, cfg)
    L_sub = secondary_node_loss(pair, cfg)
    L_node = fuse_node_losses(L_main, L_sub, cfg)
    L_M = circle_loss(pair, cfg)
    if with_cls and pair.class_index >= 0:
        L_cls = ad.scale(
            ad.add(
                classification_loss(pair.drone.class_logits, pair.class_index, cfg.label_smoothing),
                classification_loss(pair.satellite.class_logits, pair.class_index, cfg.label_smoothing),
            ),
            0.5,
        )
    else:
        L_cls = _const(0.0)
    return PairLosses(L_node, L_main, L_sub, L_M, L_cls)
