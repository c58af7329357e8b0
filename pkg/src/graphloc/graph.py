"""Per-image spatial and semantic graphs over projected detection features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import ciou_matrix
from .scene import SceneRecord

DEFAULT_THETA = 0.0


@dataclass
class ProjectionParams:
    """Node projection and semantic embeddings.

    Row-vector convention: node features are rows, so ``W_f`` has shape
    ``(D, D')`` and a node is projected as ``r @ W_f + b_f``.
    """

    W_f: Tensor
    b_f: Tensor
    W_psi: Tensor
    W_phi: Tensor

    def __post_init__(self):
        self.W_f = ad.as_tensor(self.W_f)
        self.b_f = ad.as_tensor(self.b_f)
        self.W_psi = ad.as_tensor(self.W_psi)
        self.W_phi = ad.as_tensor(self.W_phi)
        for name in ("W_f", "b_f", "W_psi", "W_phi"):
            if not np.isfinite(getattr(self, name).data).all():
                raise ValueError(f"{name} has non-finite entries")

    @classmethod
    def from_store(cls, store) -> "ProjectionParams":
        return cls(store["proj.W"], store["proj.b"], store["sem.W_psi"], store["sem.W_phi"])


@dataclass(frozen=True)
class GraphStatic:
    """Parameter-free pieces of a scene graph, computed once per record."""

    features: np.ndarray  # (N, D) raw node inputs
    ciou_mask: np.ndarray  # (N, N) CIoU where kept between detections, else 0
    hub: np.ndarray  # (N, N) fixed global-node links
    edge_mask: np.ndarray  # (N, N) bool, spatial edge present
    boxes: np.ndarray
    class_ids: np.ndarray
    confidences: np.ndarray
    has_global: bool

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def det_offset(self) -> int:
        return 1 if self.has_global else 0

    @classmethod
    def from_record(
        cls, record: SceneRecord, theta: float = DEFAULT_THETA, use_global: bool = True
    ) -> "GraphStatic":
        K = record.n_detections
        # a scene without detections keeps its global node regardless
        has_global = use_global or K == 0
        off = 1 if has_global else 0
        feats = record.feature_matrix()
        if not has_global:
            feats = feats[1:]
        N = K + off
        boxes = record.boxes()
        ciou_mask = np.zeros((N, N))
        if K:
            c = ciou_matrix(boxes, boxes)
            keep = c >= theta
            np.fill_diagonal(keep, False)
            ciou_mask[off:, off:] = np.where(keep, c, 0.0)
        hub = np.zeros((N, N))
        if has_global and N > 1:
            hub[0, 1:] = 1.0
            hub[1:, 0] = 1.0
        edge_mask = (ciou_mask != 0) | (hub != 0)
        return cls(
            features=feats,
            ciou_mask=ciou_mask,
            hub=hub,
            edge_mask=edge_mask,
            boxes=boxes,
            class_ids=record.class_ids(),
            confidences=record.confidences(),
            has_global=has_global,
        )


@dataclass
class SceneGraph:
    nodes: Tensor  # (N, D')
    w_sp: Tensor  # (N, N)
    w_se: Tensor  # (N, N)
    static: GraphStatic

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_detections(self) -> int:
        return self.static.boxes.shape[0]

    @property
    def boxes(self) -> np.ndarray:
        return self.static.boxes

    @property
    def class_ids(self) -> np.ndarray:
        return self.static.class_ids

    @property
    def confidences(self) -> np.ndarray:
        return self.static.confidences

    @property
    def has_global(self) -> bool:
        return self.static.has_global


def project_nodes(record, p: ProjectionParams) -> Tensor:
    """Apply the shared fully-connected layer to every node feature."""
    feats = record.features if isinstance(record, GraphStatic) else record.feature_matrix()
    if feats.shape[1] != p.W_f.shape[0]:
        raise ValueError(f"feature dim {feats.shape[1]} does not match W_f rows {p.W_f.shape[0]}")
    return ad.add(ad.matmul(Tensor(feats), p.W_f), p.b_f)


def spatial_adjacency(
    record, V: Tensor, theta: float = DEFAULT_THETA, use_cosine: bool = True
) -> Tensor:
    """CIoU-thresholded spatial weights times feature cosine, plus hub links."""
    static = record if isinstance(record, GraphStatic) else GraphStatic.from_record(record, theta)
    if V.shape[0] != static.n_nodes:
        raise ValueError(f"V has {V.shape[0]} rows, graph has {static.n_nodes} nodes")
    if not use_cosine:
        return Tensor(static.ciou_mask + static.hub)
    if not static.ciou_mask.any():
        return Tensor(static.hub)
    cos = ad.cosine_matrix(V, V)
    return ad.add(ad.mul(cos, static.ciou_mask), static.hub)


def semantic_adjacency(V: Tensor, p: ProjectionParams) -> Tensor:
    """Dense bilinear affinities ``(V W_psi)(V W_phi)^T``."""
    return ad.matmul(ad.matmul(V, p.W_psi), ad.transpose(ad.matmul(V, p.W_phi)))


def build_scene_graph(
    record,
    params: ProjectionParams,
    theta: float = DEFAULT_THETA,
    *,
    use_global: bool = True,
    use_cosine: bool = True,
) -> SceneGraph:
    static = (
        record
        if isinstance(record, GraphStatic)
        else GraphStatic.from_record(record, theta, use_global)
    )
    V = project_nodes(static, params)
    return SceneGraph(
        nodes=V,
        w_sp=spatial_adjacency(static, V, theta, use_cosine),
        w_se=semantic_adjacency(V, params),
        static=static,
    )
