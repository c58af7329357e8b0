"""Detections, scene records and the JSON-Lines scene file format."""
from __future__ import annotations

import io
import json
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

# Aerial target taxonomy, class_id 0..15 in printed order.
CATEGORIES = (
    "low rise residential",
    "mid rise residential",
    "high rise residential",
    "saving box",
    "baseball field",
    "basketball field",
    "playground",
    "bridge",
    "irregular buildings",
    "intersection",
    "parking lot",
    "chimney",
    "tennis court",
    "football field",
    "rugby field",
    "lighthouse",
)
N_CATEGORIES = len(CATEGORIES)

VIEWS = ("drone", "satellite")


class SceneFormatError(ValueError):
    """Raised when a scene file or record violates the format."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in coordinates normalised to the image size."""

    x1: float
    y1: float
    x2: float
    y2: float

    def violations(self) -> list[str]:
        out = []
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) for v in vals):
            out.append("bbox not finite")
            return out
        if not (0.0 <= self.x1 and self.x2 <= 1.0 and 0.0 <= self.y1 and self.y2 <= 1.0):
            out.append("bbox outside [0,1]")
        if not self.x1 < self.x2:
            out.append("x1 < x2 violated")
        if not self.y1 < self.y2:
            out.append("y1 < y2 violated")
        return out

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True, eq=False)
class Detection:
    bbox: BBox
    class_id: int
    confidence: float
    feature: np.ndarray

    def __post_init__(self):
        feat = np.array(self.feature, dtype=np.float64).reshape(-1)
        feat.setflags(write=False)
        object.__setattr__(self, "feature", feat)

    def __eq__(self, other):
        if not isinstance(other, Detection):
            return NotImplemented
        return (
            self.bbox == other.bbox
            and self.class_id == other.class_id
            and self.confidence == other.confidence
            and np.array_equal(self.feature, other.feature)
        )


@dataclass(frozen=True, eq=False)
class SceneRecord:
    """One image: its global feature plus every detected region."""

    scene_id: str
    view: str
    image_id: str
    global_feature: np.ndarray
    detections: tuple[Detection, ...] = ()

    def __post_init__(self):
        feat = np.array(self.global_feature, dtype=np.float64).reshape(-1)
        feat.setflags(write=False)
        object.__setattr__(self, "global_feature", feat)
        object.__setattr__(self, "detections", tuple(self.detections))

    def __eq__(self, other):
        if not isinstance(other, SceneRecord):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.view == other.view
            and self.image_id == other.image_id
            and np.array_equal(self.global_feature, other.global_feature)
            and self.detections == other.detections
        )

    @property
    def n_detections(self) -> int:
        return len(self.detections)

    def feature_matrix(self) -> np.ndarray:
        """Global feature in row 0, detection features in rows 1..K."""
        rows = [self.global_feature] + [d.feature for d in self.detections]
        return np.vstack(rows)

    def boxes(self) -> np.ndarray:
        if not self.detections:
            return np.zeros((0, 4))
        return np.array([d.bbox.as_tuple() for d in self.detections], dtype=np.float64)

    def class_ids(self) -> np.ndarray:
        return np.array([d.class_id for d in self.detections], dtype=np.int64)

    def confidences(self) -> np.ndarray:
        return np.array([d.confidence for d in self.detections], dtype=np.float64)


@dataclass(eq=False)
class Corpus:
    records: list[SceneRecord] = field(default_factory=list)
    feature_dim: int = 0

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.feature_dim == other.feature_dim and self.records == other.records

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def scene_ids(self) -> list[str]:
        """Distinct scene labels in first-seen order."""
        return list(dict.fromkeys(r.scene_id for r in self.records))

    @property
    def class_count(self) -> int:
        return len(self.scene_ids)

    def by_view(self, view: str) -> list[SceneRecord]:
        return [r for r in self.records if r.view == view]

    def subset(self, scene_ids: Iterable[str]) -> "Corpus":
        keep = set(scene_ids)
        return Corpus([r for r in self.records if r.scene_id in keep], self.feature_dim)

    def pairing_problems(self) -> list[str]:
        """Scenes whose drone records lack exactly one satellite partner."""
        sats = Counter(r.scene_id for r in self.records if r.view == "satellite")
        drones = {r.scene_id for r in self.records if r.view == "drone"}
        return [
            f"scene {sid!r} has {sats.get(sid, 0)} satellite records"
            for sid in sorted(drones)
            if sats.get(sid, 0) != 1
        ]


def validate_scene(record: SceneRecord, D: int) -> list[str]:
    """Return every violated invariant of ``record``; an empty list means ok."""
    out: list[str] = []
    if not record.scene_id:
        out.append("scene_id empty")
    if record.view not in VIEWS:
        out.append(f"unknown view {record.view!r}")
    if record.global_feature.shape != (D,):
        out.append("global feature dim mismatch")
    elif not np.all(np.isfinite(record.global_feature)):
        out.append("global feature not finite")
    for det in record.detections:
        out.extend(det.bbox.violations())
        if not (isinstance(det.class_id, (int, np.integer)) and 0 <= det.class_id < N_CATEGORIES):
            out.append("class_id out of range")
        if not (0.0 <= det.confidence <= 1.0):
            out.append("confidence out of range")
        if det.feature.shape != (D,):
            out.append("feature dim mismatch")
        elif not np.all(np.isfinite(det.feature)):
            out.append("feature not finite")
    return out


def _record_from_obj(obj: dict, lineno: int) -> SceneRecord:
    if not isinstance(obj, dict):
        raise SceneFormatError("expected a JSON object", lineno)
    missing = {"scene_id", "view", "image_id", "global_feature", "detections"} - obj.keys()
    if missing:
        raise SceneFormatError(f"missing keys {sorted(missing)}", lineno)
    if obj["view"] not in VIEWS:
        raise SceneFormatError(f"unknown view tag {obj['view']!r}", lineno)
    dets = []
    try:
        for d in obj["detections"]:
            box = d["bbox"]
            if len(box) != 4:
                raise SceneFormatError("bbox must have 4 numbers", lineno)
            cid = d["class_id"]
            if isinstance(cid, bool) or not isinstance(cid, int):
                raise SceneFormatError("class_id must be an integer", lineno)
            dets.append(
                Detection(
                    BBox(*(float(v) for v in box)),
                    cid,
                    float(d["confidence"]),
                    np.asarray(d["feature"], dtype=np.float64),
                )
            )
        rec = SceneRecord(
            str(obj["scene_id"]),
            obj["view"],
            str(obj["image_id"]),
            np.asarray(obj["global_feature"], dtype=np.float64),
            tuple(dets),
        )
    except SceneFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"malformed record ({exc})", lineno) from exc
    return rec


def parse_corpus(stream: bytes | str | IO) -> Corpus:
    """Parse and validate a JSON-Lines scene stream.

    The feature dimension is taken from the first record and enforced on
    every later one.
    """
    if isinstance(stream, bytes):
        text = stream.decode("utf-8")
    elif isinstance(stream, str):
        text = stream
    else:
        text = stream.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")

    records: list[SceneRecord] = []
    D = 0
    seen_ids: set[str] = set()
    for lineno, line in enumerate(io.StringIO(text), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SceneFormatError(f"malformed JSON ({exc.msg})", lineno) from exc
        rec = _record_from_obj(obj, lineno)
        if D == 0:
            D = rec.global_feature.shape[0]
            if D < 2:
                raise SceneFormatError("feature dimension must be >= 2", lineno)
        problems = validate_scene(rec, D)
        if problems:
            raise SceneFormatError("; ".join(problems), lineno)
        if rec.image_id in seen_ids:
            raise SceneFormatError(f"duplicate image_id {rec.image_id!r}", lineno)
        seen_ids.add(rec.image_id)
        records.append(rec)

    if not records:
        raise SceneFormatError("empty corpus")
    corpus = Corpus(records, D)
    for msg in corpus.pairing_problems():
        warnings.warn(msg, stacklevel=2)
    return corpus


def record_to_obj(rec: SceneRecord) -> dict:
    return {
        "scene_id": rec.scene_id,
        "view": rec.view,
        "image_id": rec.image_id,
        "global_feature": rec.global_feature.tolist(),
        "detections": [
            {
                "bbox": list(d.bbox.as_tuple()),
                "class_id": int(d.class_id),
                "confidence": d.confidence,
                "feature": d.feature.tolist(),
            }
            for d in rec.detections
        ],
    }


def serialize_corpus(corpus: Corpus | Sequence[SceneRecord]) -> bytes:
    records = corpus.records if isinstance(corpus, Corpus) else corpus
    lines = [json.dumps(record_to_obj(r), separators=(",", ":")) for r in records]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def read_corpus(path) -> Corpus:
    with open(path, "rb") as fh:
        return parse_corpus(fh.read())


def write_corpus(corpus: Corpus, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_corpus(corpus))
