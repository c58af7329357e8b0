"""Multi-task training with validation-driven task weights."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError
from .encoder import EncoderConfig, encode_record, init_params, static_graph
from .losses import (
    LossConfig,
    PairBatch,
    classification_loss,
    pair_losses,
    secondary_matches,
    secondary_similarity,
)
from .params import ParamStore
from .retrieval import evaluate
from .scene import Corpus

log = logging.getLogger(__name__)

TASKS = ("node", "m", "cls")


class TrainingError(RuntimeError):
    def __init__(self, message, epoch=None, batch=None):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_update_interval: int = 5
    seed: int = 2024
    lambda_init: tuple = (3.0, 2.0, 2.0)
    delta_clamp: float = 0.5
    val_fraction: float = 0.2
    use_loss_node: bool = True
    use_loss_m: bool = True
    use_loss_cls: bool = True

    def __post_init__(self):
        self.lambda_init = tuple(float(x) for x in self.lambda_init)
        if self.weight_update_interval < 1:
            raise ValueError("weight_update_interval must be >= 1")
        if len(self.lambda_init) != 3 or min(self.lambda_init) <= 0:
            raise ValueError("lambda_init needs three positive components")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if not (self.use_loss_node or self.use_loss_m or self.use_loss_cls):
            raise ValueError("at least one loss must stay enabled")

    @property
    def loss_mask(self) -> np.ndarray:
        return np.array([self.use_loss_node, self.use_loss_m, self.use_loss_cls], dtype=np.float64)


def normalize_weights(lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    return lam / lam.sum()


def total_loss(L_node, L_M, L_cls, lam) -> ad.Tensor:
    lam = np.asarray(lam, dtype=np.float64)
    return ad.add(
        ad.add(ad.scale(L_node, lam[0]), ad.scale(L_M, lam[1])), ad.scale(L_cls, lam[2])
    )


def update_weights(lam, delta, clamp: float = 0.5) -> np.ndarray:
    """Scale each weight by ``1 + delta_i`` (delta clamped) and renormalise."""
    lam = np.asarray(lam, dtype=np.float64)
    d = np.clip(np.asarray(delta, dtype=np.float64), -clamp, clamp)
    raw = lam * (1.0 + d)
    if np.all(raw <= 0) or raw.sum() <= 0:
        warnings.warn("task weights would collapse; keeping the previous weights", stacklevel=2)
        return lam.copy()
    raw = np.maximum(raw, 0.0)
    if np.any(raw == 0):
        warnings.warn("a task weight hit zero; keeping the previous weights", stacklevel=2)
        return lam.copy()
    return raw / raw.sum()


@dataclass
class TrainState:
    lam: np.ndarray
    epoch: int = 0
    history: list = field(default_factory=list)  # (epoch, pair_acc, r1, cls_acc)
    best_r1: float = -1.0
    best_epoch: int = -1


@dataclass
class TrainResult:
    store: ParamStore  # best-validation parameters
    last_store: ParamStore
    trace: list[dict]
    state: TrainState
    classes: list[str]
    train_scenes: list[str]
    val_scenes: list[str]

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.trace)


def split_scenes(scene_ids, val_fraction: float, seed: int):
    ids = list(scene_ids)
    rng = np.random.default_rng([seed, 7])
    perm = [ids[i] for i in rng.permutation(len(ids))]
    n_val = int(round(val_fraction * len(ids)))
    if val_fraction > 0 and len(ids) >= 2:
        n_val = min(max(n_val, 1), len(ids) - 1)
    val = sorted(perm[:n_val])
    train = sorted(perm[n_val:])
    return train, val


def _pairs(corpus: Corpus, scenes) -> list[tuple]:
    keep = set(scenes)
    sats = {r.scene_id: r for r in corpus.records if r.view == "satellite" and r.scene_id in keep}
    return [(r, sats[r.scene_id]) for r in corpus.records if r.view == "drone" and r.scene_id in sats]


class _Model:
    """Bundles params, config and the per-record static graph cache."""

    def __init__(self, store, enc_cfg: EncoderConfig):
        self.store = store
        self.cfg = enc_cfg
        self.cache: dict = {}

    def static(self, rec):
        st = self.cache.get(rec.image_id)
        if st is None:
            st = self.cache[rec.image_id] = static_graph(rec, self.cfg)
        return st

    def encode(self, rec, train=False, rng=None):
        return encode_record(self.static(rec), self.store, self.cfg, train, rng)


def validation_metrics(model: _Model, corpus: Corpus, val_scenes, loss_cfg: LossConfig, class_index: dict):
    """``(pair_acc, r1, cls_acc)`` on the validation scenes."""
    pairs = _pairs(corpus, val_scenes)
    if not pairs:
        return 0.0, 0.0, 0.0
    val = corpus.subset(val_scenes)
    rep = evaluate(val, model.store, model.cfg, "d2s", static_cache=model.cache)
    correct = total = 0
    cls_hits = []
    with ad.no_grad():
        encs = {}
        for d, s in pairs:
            for r in (d, s):
                if r.image_id not in encs:
                    encs[r.image_id] = model.encode(r)
                    pred = int(np.argmax(encs[r.image_id].class_logits.data))
                    cls_hits.append(pred == class_index[r.scene_id])
            pair = PairBatch(encs[d.image_id], encs[s.image_id], 1)
            sim = secondary_similarity(pair, loss_cfg)
            if sim is None:
                continue
            labels = secondary_matches(pair.drone.graph, pair.satellite.graph, loss_cfg).labels
            pred = sim.data > 0.0  # sigmoid(s) > 0.5
            correct += int((pred == labels.astype(bool)).sum())
            total += labels.size
    pair_acc = correct / total if total else 0.0
    return pair_acc, rep.r1, float(np.mean(cls_hits)) if cls_hits else 0.0


def _batch_loss(model, batch, all_sats, loss_cfg, class_index, lam_eff, rng):
    encs = {}  # image_id -> (record, encoding), in first-use order

    def enc(r):
        if r.image_id not in encs:
            encs[r.image_id] = (r, model.encode(r, train=True, rng=rng))
        return encs[r.image_id][1]

    node_terms, m_terms = [], []
    for i, (d, s) in enumerate(batch):
        neg = None
        for j in range(1, len(batch)):
            cand = batch[(i + j) % len(batch)][1]
            if cand.scene_id != d.scene_id:
                neg = cand
                break
        if neg is None:
            others = [x for x in all_sats if x.scene_id != d.scene_id]
            neg = others[int(rng.integers(len(others)))] if others else None
        for sat, y in ((s, 1), (neg, 0)):
            if sat is None:
                continue
            losses = pair_losses(PairBatch(enc(d), enc(sat), y), loss_cfg, with_cls=False)
            node_terms.append(losses.node)
            m_terms.append(losses.embed)
    cls_terms = [
        classification_loss(e.class_logits, class_index[r.scene_id], loss_cfg.label_smoothing)
        for r, e in encs.values()
    ]
    L_node = ad.mean(ad.concat_rows(node_terms))
    L_M = ad.mean(ad.concat_rows(m_terms))
    L_cls = ad.mean(ad.concat_rows(cls_terms))
    return L_node, L_M, L_cls, total_loss(L_node, L_M, L_cls, lam_eff)


def train(
    corpus: Corpus,
    enc_cfg: EncoderConfig | None = None,
    loss_cfg: LossConfig | None = None,
    train_cfg: TrainConfig | None = None,
    store: ParamStore | None = None,
    on_epoch=None,
) -> TrainResult:
    """Train on ``corpus`` and return the best-validation-R@1 parameters plus the trace."""
    enc_cfg = enc_cfg or EncoderConfig()
    loss_cfg = loss_cfg or LossConfig()
    tc = train_cfg or TrainConfig()
    classes = corpus.scene_ids
    if len(classes) < 2:
        raise ValueError("training needs at least two scenes")
    class_index = {s: i for i, s in enumerate(classes)}
    train_scenes, val_scenes = split_scenes(classes, tc.val_fraction, tc.seed)
    pairs = _pairs(corpus, train_scenes)
    if not pairs:
        raise ValueError("no drone/satellite pairs in the training scenes")
    train_sats = [s for s in corpus.records if s.view == "satellite" and s.scene_id in set(train_scenes)]

    if store is None:
        store = init_params(corpus.feature_dim, len(classes), enc_cfg, tc.seed)
    model = _Model(store, enc_cfg)
    rng = np.random.default_rng([tc.seed, 11])
    mask = tc.loss_mask

    state = TrainState(lam=normalize_weights(tc.lambda_init))
    trace: list[dict] = []

    # without held-out scenes, the training scenes drive weight updates and model selection
    monitor = val_scenes or train_scenes

    def validate(epoch):
        m = validation_metrics(model, corpus, monitor, loss_cfg, class_index)
        state.history.append((epoch,) + tuple(m))
        if m[1] >= state.best_r1:
            state.best_r1, state.best_epoch = m[1], epoch
            best[0] = store.state_dict()
        return m

    best = [store.state_dict()]
    last_metrics = validate(0)
    for epoch in range(1, tc.epochs + 1):
        state.epoch = epoch
        order = rng.permutation(len(pairs))
        sums = np.zeros(4)
        n_batches = 0
        lam_eff = state.lam * mask
        lam_eff = lam_eff / lam_eff.sum()
        for b, start in enumerate(range(0, len(order), tc.batch_size)):
            batch = [pairs[i] for i in order[start : start + tc.batch_size]]
            store.zero_grad()
            try:
                L_node, L_M, L_cls, L = _batch_loss(model, batch, train_sats, loss_cfg, class_index, lam_eff, rng)
                L.backward()
                store.step(tc.lr, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay)
            except (NonFiniteError, FloatingPointError) as exc:
                raise TrainingError(str(exc), epoch, b) from exc
            sums += [L_node.item(), L_M.item(), L_cls.item(), L.item()]
            n_batches += 1
        means = sums / max(n_batches, 1)

        metrics = None
        if epoch % tc.weight_update_interval == 0 or epoch == tc.epochs:
            metrics = validate(epoch)
        if metrics is not None and epoch % tc.weight_update_interval == 0 and last_metrics is not None:
            delta = np.array(metrics) - np.array(last_metrics)
            state.lam = update_weights(state.lam, delta, tc.delta_clamp)
            last_metrics = metrics
        rec = {
            "epoch": epoch,
            "loss_node": float(means[0]),
            "loss_m": float(means[1]),
            "loss_cls": float(means[2]),
            "loss_total": float(means[3]),
            "lambda": [float(x) for x in state.lam],
            "val_pair_acc": None if metrics is None else float(metrics[0]),
            "val_r1": None if metrics is None else float(metrics[1]),
            "val_cls_acc": None if metrics is None else float(metrics[2]),
        }
        trace.append(rec)
        log.debug("epoch %d %s", epoch, rec)
        if on_epoch is not None:
            on_epoch(rec)

    last = store.copy()
    best_store = store.copy()
    best_store.load_state_dict(best[0])
    return TrainResult(best_store, last, trace, state, classes, train_scenes, val_scenes)
