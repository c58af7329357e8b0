"""Embedding index, ranking and retrieval metrics (Recall@K, R@1P, AP)."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from . import autodiff as ad
from .params import CheckpointError, MAGIC

INDEX_VERSION = 1
DIRECTIONS = {"d2s": ("drone", "satellite"), "s2d": ("satellite", "drone")}


class EmptyIndexError(ValueError):
    pass


@dataclass
class EmbeddingIndex:
    image_ids: list[str] = field(default_factory=list)
    scene_ids: list[str] = field(default_factory=list)
    vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            self.vectors = self.vectors.reshape(len(self.image_ids), -1)
        if not (len(self.image_ids) == len(self.scene_ids) == self.vectors.shape[0]):
            raise ValueError("image_ids, scene_ids and vectors disagree in length")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("image_ids must be unique")

    def __len__(self):
        return len(self.image_ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingIndex):
            return NotImplemented
        return (
            self.image_ids == other.image_ids
            and self.scene_ids == other.scene_ids
            and np.array_equal(self.vectors, other.vectors)
        )

    def write(self, fh: BinaryIO) -> None:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", INDEX_VERSION, self.dim, len(self)))
        for iid, sid, vec in zip(self.image_ids, self.scene_ids, self.vectors):
            for s in (iid, sid):
                raw = s.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
            fh.write(np.asarray(vec, dtype="<f8").tobytes())

    @classmethod
    def read(cls, fh: BinaryIO) -> "EmbeddingIndex":
        buf = fh.read()
        if buf[:4] != MAGIC:
            raise CheckpointError("bad magic")
        try:
            version, dim, count = struct.unpack_from("<III", buf, 4)
            if version != INDEX_VERSION:
                raise CheckpointError(f"unsupported index version {version}")
            pos = 16
            iids, sids, vecs = [], [], []
            for _ in range(count):
                strs = []
                for _ in range(2):
                    (n,) = struct.unpack_from("<I", buf, pos)
                    pos += 4
                    strs.append(buf[pos : pos + n].decode("utf-8"))
                    pos += n
                if pos + 8 * dim > len(buf):
                    raise CheckpointError("truncated index")
                vecs.append(np.frombuffer(buf, dtype="<f8", count=dim, offset=pos).astype(np.float64))
                pos += 8 * dim
                iids.append(strs[0])
                sids.append(strs[1])
        except struct.error as exc:
            raise CheckpointError("truncated index") from exc
        vectors = np.vstack(vecs) if vecs else np.zeros((0, dim))
        return cls(iids, sids, vectors)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            self.write(fh)

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        with open(path, "rb") as fh:
            return cls.read(fh)


def _unit_rows(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, n, out=np.zeros_like(X), where=n >= 1e-12)


def cosine_scores(Q: np.ndarray, G: np.ndarray) -> np.ndarray:
    return _unit_rows(Q) @ _unit_rows(G).T


def order_by_score(scores: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    """Indices sorted by descending score, ties broken by id ascending."""
    ids_arr = np.asarray(ids, dtype=object)
    tie = np.argsort(np.argsort(ids_arr, kind="stable"), kind="stable")
    return np.lexsort((tie, -np.asarray(scores, dtype=np.float64)))


def rank_query(query, index: EmbeddingIndex, scores: np.ndarray | None = None) -> list[tuple[str, float]]:
    """Rank the whole index against one query vector by cosine similarity.

    ``scores`` may be supplied directly (e.g. from the fallback path), in
    which case ``query`` is ignored.
    """
    if len(index) == 0:
        raise EmptyIndexError("cannot rank against an empty index")
    if scores is None:
        q = np.asarray(query, dtype=np.float64).reshape(1, -1)
        if q.shape[1] != index.dim:
            raise ValueError(f"query dim {q.shape[1]} != index dim {index.dim}")
        scores = cosine_scores(q, index.vectors)[0]
    order = order_by_score(scores, index.image_ids)
    return [(index.image_ids[i], float(scores[i])) for i in order]


def fallback_similarity(query_record, gallery_record, store) -> float:
    """Cosine of the two projected global features (used when a view has no detections)."""
    W, b = store["proj.W"].data, store["proj.b"].data
    q = query_record.global_feature @ W + b[0]
    g = gallery_record.global_feature @ W + b[0]
    return float(cosine_scores(q, g)[0, 0])


# ----------------------------------------------------------------------------
# metrics


def recall_at_k(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        return 0.0
    return float(np.mean(ranks <= k))


def one_percent_k(gallery_size: int) -> int:
    return max(1, math.ceil(0.01 * gallery_size))


def recall_at_1p(ranks, gallery_size: int) -> float:
    if gallery_size < 1:
        raise ValueError("gallery_size must be >= 1")
    return recall_at_k(ranks, one_percent_k(gallery_size))


def average_precision_single(relevant_ranks) -> float:
    """AP of one ranked list from the 1-based ranks of its relevant items."""
    r = np.sort(np.asarray(relevant_ranks, dtype=np.float64))
    if r.size == 0:
        raise ValueError("need at least one relevant item")
    return float(np.mean(np.arange(1, r.size + 1) / r))


def average_precision(per_query_relevant_ranks) -> float:
    """Mean AP over queries; each entry is a rank or a list of relevant ranks."""
    vals = [average_precision_single(np.atleast_1d(r)) for r in per_query_relevant_ranks]
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class MetricsReport:
    direction: str
    recall_at: dict
    r_at_1p: float
    ap: float
    ranks: list[int]
    n_queries: int
    gallery_size: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall_at"] = {str(k): v for k, v in self.recall_at.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @property
    def r1(self) -> float:
        return self.recall_at[1]


def relevant_ranks(scores: np.ndarray, relevant: np.ndarray, gallery_ids: Sequence[str]) -> list[np.ndarray]:
    """For each query row, 1-based positions of its relevant gallery items."""
    out = []
    for q in range(scores.shape[0]):
        order = order_by_score(scores[q], gallery_ids)
        pos = np.empty(len(order), dtype=np.int64)
        pos[order] = np.arange(1, len(order) + 1)
        out.append(np.sort(pos[relevant[q]]))
    return out


def metrics_from_scores(
    scores: np.ndarray,
    relevant: np.ndarray,
    gallery_ids: Sequence[str],
    direction: str = "d2s",
    ks=(1, 5, 10),
) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    relevant = np.asarray(relevant, dtype=bool)
    if not relevant.any(axis=1).all():
        raise ValueError("every query needs at least one relevant gallery item")
    rel = relevant_ranks(scores, relevant, gallery_ids)
    first = [int(r[0]) for r in rel]
    G = scores.shape[1]
    return MetricsReport(
        direction=direction,
        recall_at={k: recall_at_k(first, k) for k in ks},
        r_at_1p=recall_at_1p(first, G),
        ap=average_precision(rel),
        ranks=first,
        n_queries=scores.shape[0],
        gallery_size=G,
    )


# ----------------------------------------------------------------------------
# end-to-end evaluation


def embed_records(records, store, cfg, static_cache: dict | None = None) -> np.ndarray:
    """Pooled embeddings in evaluation mode, one row per record."""
    from .encoder import encode_record, static_graph

    rows = []
    with ad.no_grad():
        for rec in records:
            st = None if static_cache is None else static_cache.get(rec.image_id)
            if st is None:
                st = static_graph(rec, cfg)
                if static_cache is not None:
                    static_cache[rec.image_id] = st
            rows.append(encode_record(st, store, cfg).embedding.data[0])
    return np.vstack(rows) if rows else np.zeros((0, cfg.hidden_dim))


def score_matrix(queries, gallery, store, cfg, static_cache=None) -> np.ndarray:
    """Embedding cosine, switched to the global-feature fallback for detection-free pairs."""
    S = cosine_scores(
        embed_records(queries, store, cfg, static_cache), embed_records(gallery, store, cfg, static_cache)
    )
    q_empty = np.array([r.n_detections == 0 for r in queries])
    g_empty = np.array([r.n_detections == 0 for r in gallery])
    if q_empty.any() or g_empty.any():
        W, b = store["proj.W"].data, store["proj.b"].data
        Pq = np.vstack([r.global_feature for r in queries]) @ W + b
        Pg = np.vstack([r.global_feature for r in gallery]) @ W + b
        F = cosine_scores(Pq, Pg)
        use = q_empty[:, None] | g_empty[None, :]
        S = np.where(use, F, S)
    return S


def build_index(records, store, cfg) -> EmbeddingIndex:
    return EmbeddingIndex(
        [r.image_id for r in records], [r.scene_id for r in records], embed_records(records, store, cfg)
    )


def evaluate(corpus, store, cfg, direction: str = "d2s", queries=None, gallery=None, static_cache=None) -> MetricsReport:
    """Rank every query view against every gallery view of the other type.

    ``queries``/``gallery`` override the record lists taken from ``corpus``.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {sorted(DIRECTIONS)}")
    qv, gv = DIRECTIONS[direction]
    records = corpus.records if corpus is not None else []
    queries = queries if queries is not None else [r for r in records if r.view == qv]
    gallery = gallery if gallery is not None else [r for r in records if r.view == gv]
    if not queries:
        raise ValueError(f"no {qv} records to query with")
    if not gallery:
        raise ValueError(f"no {gv} records in the gallery")
    S = score_matrix(queries, gallery, store, cfg, static_cache)
    rel = np.array([[q.scene_id == g.scene_id for g in gallery] for q in queries])
    keep = rel.any(axis=1)
    if not keep.all():
        S, rel = S[keep], rel[keep]
    return metrics_from_scores(S, rel, [g.image_id for g in gallery], direction)
