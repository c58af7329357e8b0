"""Input coercion helpers shared by the estimator and the CLI."""
from __future__ import annotations

import os
from typing import Iterable

import numpy as np

from .scene import Corpus, SceneFormatError, SceneRecord, parse_corpus, read_corpus, validate_scene


def check_corpus(X, feature_dim: int | None = None) -> Corpus:
    """Accept a Corpus, a record sequence, a JSONL path or raw JSONL bytes."""
    if isinstance(X, Corpus):
        corpus = X
    elif isinstance(X, (bytes, bytearray)):
        corpus = parse_corpus(bytes(X))
    elif isinstance(X, (str, os.PathLike)):
        corpus = read_corpus(X)
    else:
        records = check_records(X)
        corpus = Corpus(records, records[0].global_feature.shape[0])
    if not corpus.records:
        raise SceneFormatError("empty corpus")
    if feature_dim is not None and corpus.feature_dim != feature_dim:
        raise ValueError(f"corpus feature dim {corpus.feature_dim} != expected {feature_dim}")
    return corpus


def check_records(X: Iterable, feature_dim: int | None = None) -> list[SceneRecord]:
    if isinstance(X, Corpus):
        records = list(X.records)
    elif isinstance(X, SceneRecord):
        records = [X]
    else:
        records = list(X)
    if not records:
        raise ValueError("need at least one scene record")
    for r in records:
        if not isinstance(r, SceneRecord):
            raise TypeError(f"expected SceneRecord, got {type(r).__name__}")
    D = feature_dim if feature_dim is not None else records[0].global_feature.shape[0]
    for r in records:
        problems = validate_scene(r, D)
        if problems:
            raise ValueError(f"{r.image_id}: " + "; ".join(problems))
    return records


def check_score_matrix(scores, relevant) -> tuple[np.ndarray, np.ndarray]:
    S = np.asarray(scores, dtype=np.float64)
    R = np.asarray(relevant, dtype=bool)
    if S.ndim != 2 or S.shape != R.shape:
        raise ValueError(f"scores {S.shape} and relevance {R.shape} must be matching 2-D arrays")
    if not np.all(np.isfinite(S)):
        raise ValueError("scores must be finite")
    return S, R
