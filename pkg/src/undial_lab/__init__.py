"""Desk-scale language-model unlearning with self-distillation on adjusted logits."""

from .aux_unlearn import AuxMethod, AuxSpec, DecodeTimeModel, build_aux_model
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import CorpusConfig, SequenceRecord, generate_corpus, split_sequential
from .errors import (IncompatibleCheckpointError, InvalidArgumentError, NonFiniteLossError,
                     ShapeError, UndialError)
from .harness import ExperimentConfig, run_sequential, run_sweep, run_train_base, run_unlearn
from .metrics import MetricsConfig, MetricsReport, evaluate
from .model import LmConfig, TinyLM
from .objectives import Method, RetainReg, UnlearnSpec, undial_loss

__version__ = "0.1.0"

__all__ = [
    "AuxMethod", "AuxSpec", "CorpusConfig", "DecodeTimeModel", "ExperimentConfig",
    "IncompatibleCheckpointError", "InvalidArgumentError", "LmConfig", "Method", "MetricsConfig",
    "MetricsReport", "NonFiniteLossError", "RetainReg", "SequenceRecord", "ShapeError", "TinyLM",
    "UndialError", "UnlearnSpec", "build_aux_model", "evaluate", "generate_corpus",
    "load_checkpoint", "run_sequential", "run_sweep", "run_train_base", "run_unlearn",
    "save_checkpoint", "split_sequential", "undial_loss",
]
