"""Anomaly amplification + normality distillation on a seeded toy corpus."""

from .corpus import CorpusConfig, make_class_corpus, make_corpus
from .estimator import AANDDetector, check_images
from .metrics import EvalReport, auroc, evaluate_maps, pixel_auroc, pro
from .trainer import AANDModel, TrainConfig, load_checkpoint, save_checkpoint, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "AANDDetector", "AANDModel", "CorpusConfig", "EvalReport", "TrainConfig", "auroc", "check_images",
    "evaluate_maps", "load_checkpoint", "make_class_corpus", "make_corpus", "pixel_auroc", "pro",
    "save_checkpoint", "train_stage1", "train_stage2",
]
