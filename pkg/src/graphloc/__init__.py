"""Object-graph cross-view drone/satellite localization on a small numpy autodiff engine."""
from .encoder import EncoderConfig, encode_record, init_params
from .estimator import GraphLocalizer
from .losses import LossConfig
from .params import ParamStore, load_checkpoint, save_checkpoint
from .retrieval import EmbeddingIndex, MetricsReport, evaluate
from .scene import BBox, Corpus, Detection, SceneFormatError, SceneRecord, parse_corpus, read_corpus, write_corpus
from .synth import SynthConfig, generate
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "Corpus",
    "Detection",
    "EmbeddingIndex",
    "EncoderConfig",
    "GraphLocalizer",
    "LossConfig",
    "MetricsReport",
    "ParamStore",
    "SceneFormatError",
    "SceneRecord",
    "SynthConfig",
    "TrainConfig",
    "encode_record",
    "evaluate",
    "generate",
    "init_params",
    "load_checkpoint",
    "parse_corpus",
    "read_corpus",
    "save_checkpoint",
    "train",
    "write_corpus",
]
