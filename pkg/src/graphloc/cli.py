"""Command-line entry point: synth, train, embed, rank, eval, gradcheck.

Settings come from an optional ``key = value`` file (``--config``) and are
overridden by ``--set key=value`` and the dedicated flags.  Exit codes:
0 ok, 1 usage, 2 data, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NonFiniteError
from .encoder import EncoderConfig
from .estimator import store_from_state
from .losses import LossConfig
from .params import CheckpointError, load_checkpoint, save_checkpoint
from .retrieval import (
    DIRECTIONS,
    EmbeddingIndex,
    EmptyIndexError,
    build_index,
    cosine_scores,
    evaluate,
    rank_query,
    score_matrix,
)
from .scene import SceneFormatError, read_corpus, write_corpus
from .synth import SynthConfig, generate
from .trainer import TrainConfig, TrainingError, train

log = logging.getLogger("graphloc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SECTIONS = {"synth": SynthConfig, "encoder": EncoderConfig, "loss": LossConfig, "train": TrainConfig}
PATH_KEYS = ("corpus", "checkpoint", "trace", "index", "out")

ABLATIONS = {
    "no_spatial": ("use_spatial", False),
    "no_semantic": ("use_semantic", False),
    "no_global": ("use_global_node", False),
    "no_loss_node": ("use_loss_node", False),
    "no_loss_m": ("use_loss_m", False),
    "no_loss_cls": ("use_loss_cls", False),
    "no_cosine_weight": ("use_cosine", False),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _field_defaults() -> dict:
    """key -> default value across every config section (``seed`` is shared)."""
    out = {}
    for cls in SECTIONS.values():
        for f in dataclasses.fields(cls):
            if f.default is not dataclasses.MISSING:
                out.setdefault(f.name, f.default)
    return out


FIELD_DEFAULTS = _field_defaults()


def _convert(key: str, raw: str):
    if key in PATH_KEYS:
        return raw
    default = FIELD_DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(","))
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None
    return raw.strip()


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out.update(_pair(key, value, f"config line {n}"))
    return out


def _pair(key: str, value: str, where: str) -> dict:
    if key not in FIELD_DEFAULTS and key not in PATH_KEYS:
        raise UsageError(f"{where}: unknown key {key!r}")
    return {key: _convert(key, value)}


@dataclasses.dataclass
class RunConfig:
    values: dict = dataclasses.field(default_factory=dict)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def section(self, name: str):
        cls = SECTIONS[name]
        names = {f.name for f in dataclasses.fields(cls)}
        try:
            return cls(**{k: v for k, v in self.values.items() if k in names})
        except ValueError as exc:
            raise UsageError(str(exc)) from exc


def build_run_config(args) -> RunConfig:
    values = {}
    if args.config:
        try:
            values.update(parse_config_text(Path(args.config).read_text()))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values.update(_pair(k.strip(), v.strip(), "--set"))
    if args.seed is not None:
        values["seed"] = args.seed
    for flag, (key, val) in ABLATIONS.items():
        if getattr(args, flag, False):
            values[key] = val
    for key in PATH_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return RunConfig(values)


def _require(cfg: RunConfig, key: str) -> str:
    v = cfg.get(key)
    if not v:
        raise UsageError(f"missing --{key}")
    return v


def meta_path(checkpoint) -> Path:
    return Path(str(checkpoint) + ".meta.json")


def _load_model(cfg: RunConfig):
    ckpt = _require(cfg, "checkpoint")
    state = load_checkpoint(ckpt)
    mp = meta_path(ckpt)
    if mp.exists():
        meta = json.loads(mp.read_text())
        enc = EncoderConfig.from_dict(meta["encoder"])
    else:
        enc = cfg.section("encoder")
    return store_from_state(state), enc


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: RunConfig, args) -> int:
    corpus = generate(cfg.section("synth"))
    write_corpus(corpus, _require(cfg, "out"))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    corpus = read_corpus(_require(cfg, "corpus"))
    out = _require(cfg, "out")
    enc, loss, tc = cfg.section("encoder"), cfg.section("loss"), cfg.section("train")
    result = train(corpus, enc, loss, tc)
    save_checkpoint(result.store, out)
    meta = {
        "encoder": enc.to_dict(),
        "classes": result.classes,
        "feature_dim": corpus.feature_dim,
        "val_scenes": result.val_scenes,
        "best_epoch": result.state.best_epoch,
    }
    meta_path(out).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    trace = cfg.get("trace") or str(out) + ".trace.jsonl"
    Path(trace).write_text(result.trace_jsonl())
    return EXIT_OK


def cmd_embed(cfg: RunConfig, args) -> int:
    store, enc = _load_model(cfg)
    corpus = read_corpus(_require(cfg, "corpus"))
    build_index(corpus.records, store, enc).save(_require(cfg, "out"))
    return EXIT_OK


def cmd_rank(cfg: RunConfig, args) -> int:
    store, enc = _load_model(cfg)
    corpus = read_corpus(_require(cfg, "corpus"))
    by_id = {r.image_id: r for r in corpus.records}
    if args.query not in by_id:
        raise SceneFormatError(f"query {args.query!r} not found in corpus")
    query = by_id[args.query]
    if cfg.get("index"):
        index = EmbeddingIndex.load(cfg.get("index"))
        gallery = [by_id.get(i) for i in index.image_ids]
        empty = query.n_detections == 0 or any(g is not None and g.n_detections == 0 for g in gallery)
        if empty:
            if any(g is None for g in gallery):
                raise SceneFormatError("fallback scoring needs every index entry present in the corpus")
            scores = score_matrix([query], gallery, store, enc)[0]
        else:
            q = build_index([query], store, enc).vectors
            if q.shape[1] != index.dim:
                raise ValueError(f"query dim {q.shape[1]} != index dim {index.dim}")
            scores = cosine_scores(q, index.vectors)[0]
    else:
        gallery = corpus.by_view("satellite" if query.view == "drone" else "drone")
        index = EmbeddingIndex(
            [g.image_id for g in gallery], [g.scene_id for g in gallery], np.zeros((len(gallery), 1))
        )
        scores = score_matrix([query], gallery, store, enc)[0]
    ranked = rank_query(None, index, scores=scores)
    for pos, (iid, score) in enumerate(ranked[: args.top], start=1):
        print(f"{pos} {iid} {score:.6f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    store, enc = _load_model(cfg)
    corpus = read_corpus(_require(cfg, "corpus"))
    report = evaluate(corpus, store, enc, args.direction)
    text = report.to_json()
    if cfg.get("out"):
        Path(cfg.get("out")).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    seeds = range(args.seeds) if cfg.get("seed") is None else [int(cfg.get("seed"))]
    results = run_suite(seeds)
    worst = max(results, key=lambda r: r.error)
    for r in results:
        if args.verbose or not r.ok:
            print(f"{r.name} seed={r.seed} err={r.error:.3e} {'ok' if r.ok else 'FAIL'}")
    print(json.dumps({"checks": len(results), "max_rel_error": worst.error, "worst": worst.name, "tolerance": TOLERANCE}))
    return EXIT_OK if worst.error < TOLERANCE else EXIT_NUMERIC


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "embed": cmd_embed,
    "rank": cmd_rank,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="graphloc", description="Object-graph cross-view localization")
    p.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    for flag in ABLATIONS:
        common.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    s.add_argument("--out")
    s = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    s.add_argument("--corpus")
    s.add_argument("--out")
    s.add_argument("--trace")
    s = sub.add_parser("embed", parents=[common], help="write an embedding index")
    s.add_argument("--checkpoint")
    s.add_argument("--corpus")
    s.add_argument("--out")
    s = sub.add_parser("rank", parents=[common], help="rank the gallery for one query")
    s.add_argument("--checkpoint")
    s.add_argument("--corpus")
    s.add_argument("--index")
    s.add_argument("--query", required=True)
    s.add_argument("--top", type=int, default=10)
    s = sub.add_parser("eval", parents=[common], help="print a MetricsReport")
    s.add_argument("--checkpoint")
    s.add_argument("--corpus")
    s.add_argument("--direction", choices=sorted(DIRECTIONS), default="d2s")
    s.add_argument("--out")
    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--seeds", type=int, default=5, help="check seeds 0..N-1 (ignored with --seed)")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
        cfg = build_run_config(args)
        if args.command == "rank" and args.top < 1:
            raise UsageError("--top must be >= 1")
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, TrainingError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SceneFormatError, CheckpointError, EmptyIndexError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
