"""Seeded synthetic drone/satellite scene corpora.

Every scene is a set of objects (class, box, appearance).  The satellite view
sees all of them; each drone view jitters boxes, drops objects and adds
feature noise.  Both views carry a fixed per-view additive offset that stands
in for the appearance gap between the two sensors.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .scene import N_CATEGORIES, BBox, Corpus, Detection, SceneRecord

SWEEP_KNOBS = ("drop_prob", "feature_noise", "center_jitter")


@dataclass
class SynthConfig:
    n_scenes: int = 50
    objects_min: int = 3
    objects_max: int = 8
    drone_views: int = 4
    feature_dim: int = 64
    center_jitter: float = 0.03
    scale_jitter: float = 0.1
    drop_prob: float = 0.15
    feature_noise: float = 0.1
    domain_offset: float = 0.5
    confidence_min: float = 0.6
    confidence_max: float = 1.0
    confidence_jitter: float = 0.1
    # per-coordinate std of class prototypes; offsets and noise share this unit scale
    prototype_scale: float = 0.4
    # appearance spread of individual objects around their class prototype
    instance_spread: float = 0.5
    position_scale: float = 1.0
    seed: int = 2024

    def __post_init__(self):
        for name in ("drop_prob",):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ValueError("need 1 <= objects_min <= objects_max")
        if not 0.0 <= self.confidence_min <= self.confidence_max <= 1.0:
            raise ValueError("need 0 <= confidence_min <= confidence_max <= 1")
        if self.feature_dim < 4:
            raise ValueError("feature_dim must be >= 4")
        for name in (
            "center_jitter",
            "scale_jitter",
            "feature_noise",
            "domain_offset",
            "instance_spread",
            "prototype_scale",
            "confidence_jitter",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_scenes < 1 or self.drone_views < 0:
            raise ValueError("n_scenes must be >= 1 and drone_views >= 0")


def _world(cfg: SynthConfig):
    """Class prototypes and view offsets, shared by every scene."""
    rng = np.random.default_rng([cfg.seed, 0])
    Dc = cfg.feature_dim - 2
    protos = cfg.prototype_scale * rng.standard_normal((N_CATEGORIES, Dc))
    offsets = {}
    for view in ("satellite", "drone"):
        # per-coordinate magnitude, random signs
        o = cfg.domain_offset * rng.choice([-1.0, 1.0], size=cfg.feature_dim)
        offsets[view] = o
    return protos, offsets


def _feature(content: np.ndarray, cx: float, cy: float, cfg: SynthConfig) -> np.ndarray:
    return np.concatenate([content, cfg.position_scale * np.array([cx - 0.5, cy - 0.5])])


def _clip_box(cx, cy, w, h) -> BBox:
    w = float(np.clip(w, 0.01, 1.0))
    h = float(np.clip(h, 0.01, 1.0))
    x1 = float(np.clip(cx - w / 2, 0.0, 1.0 - 0.01))
    y1 = float(np.clip(cy - h / 2, 0.0, 1.0 - 0.01))
    x2 = float(np.clip(cx + w / 2, x1 + 0.005, 1.0))
    y2 = float(np.clip(cy + h / 2, y1 + 0.005, 1.0))
    return BBox(x1, y1, x2, y2)


def _scene(idx: int, cfg: SynthConfig, protos, offsets) -> list[SceneRecord]:
    rng = np.random.default_rng([cfg.seed, 1, idx])
    D = cfg.feature_dim
    n = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    classes = rng.integers(0, N_CATEGORIES, size=n)
    centers = rng.uniform(0.15, 0.85, size=(n, 2))
    sizes = rng.uniform(0.05, 0.25, size=(n, 2))
    inst = rng.standard_normal((n, D - 2))
    content = protos[classes] + cfg.instance_spread * cfg.prototype_scale * inst
    scene_id = f"scene_{idx:04d}"

    records = []
    # satellite: every object, exact geometry
    sat_conf = rng.uniform(cfg.confidence_min, cfg.confidence_max, size=n)
    dets = []
    base_feats = []
    for k in range(n):
        box = _clip_box(centers[k, 0], centers[k, 1], sizes[k, 0], sizes[k, 1])
        f = _feature(content[k], *box.center, cfg)
        base_feats.append(f)
        dets.append(Detection(box, int(classes[k]), float(sat_conf[k]), f + offsets["satellite"]))
    glob = np.mean(base_feats, axis=0)
    records.append(
        SceneRecord(scene_id, "satellite", f"{scene_id}_sat", glob + offsets["satellite"], tuple(dets))
    )

    for v in range(cfg.drone_views):
        keep = rng.random(n) >= cfg.drop_prob
        # draws are unconditional so sweeps over one knob share all other randomness
        jit_c = rng.normal(0.0, 1.0, size=(n, 2)) * cfg.center_jitter
        jit_s = rng.uniform(-1.0, 1.0, size=(n, 2)) * cfg.scale_jitter
        noise = rng.standard_normal((n + 1, D)) * cfg.feature_noise
        conf = np.clip(
            sat_conf + rng.uniform(-1.0, 1.0, size=n) * cfg.confidence_jitter,
            cfg.confidence_min,
            cfg.confidence_max,
        )
        dets = []
        for k in range(n):
            if not keep[k]:
                continue
            c = np.clip(centers[k] + jit_c[k], 0.0, 1.0)
            s = sizes[k] * (1.0 + jit_s[k])
            box = _clip_box(c[0], c[1], s[0], s[1])
            f = _feature(content[k], *box.center, cfg) + offsets["drone"] + noise[k + 1]
            dets.append(Detection(box, int(classes[k]), float(conf[k]), f))
        g = glob + offsets["drone"] + noise[0]
        records.append(SceneRecord(scene_id, "drone", f"{scene_id}_drone_{v}", g, tuple(dets)))
    return records


def generate(cfg: SynthConfig | None = None) -> Corpus:
    cfg = cfg or SynthConfig()
    protos, offsets = _world(cfg)
    records: list[SceneRecord] = []
    for i in range(cfg.n_scenes):
        records.extend(_scene(i, cfg, protos, offsets))
    return Corpus(records, cfg.feature_dim)


def perturbation_sweep(cfg: SynthConfig, knob: str, values) -> list[Corpus]:
    """One corpus per value of ``knob``; all other randomness shares ``cfg.seed``."""
    if knob not in SWEEP_KNOBS:
        raise ValueError(f"unknown knob {knob!r}; expected one of {SWEEP_KNOBS}")
    return [generate(dataclasses.replace(cfg, **{knob: v})) for v in values]
