"""Multi-bit quantization-aware training with per-bit coreset selection.

A small NumPy reverse-mode autodiff engine drives a network whose shared
full-precision weights are quantized on the fly to any supported bit-width.
Per-bit importance scores from training dynamics feed score-weighted coreset
sampling, so each bit-width trains on its own small subset every epoch.
"""

from .autograd import Tensor, backward
from .config import ConfigError, RunConfig, load_config, validate_config
from .coreset import CoresetPlan, build_plan, normalize_scores, sample_coreset, sampling_probabilities
from .data import Dataset, load_cifar10_bin, load_mnist_idx, synth_blobs
from .model import (
    FULL_PRECISION,
    Arch,
    BitRanges,
    BNPolicy,
    MultiBitModel,
    build_model,
    child_forward,
    load_checkpoint,
    save_checkpoint,
)
from .quant import QuantSpec, bias_correct, dorefa_quantize, statsq_quantize
from .scoring import ScoreMatrix, score_baseline, score_bitwise_dynamics, spearman
from .training import TrainConfig, bn_adapt, evaluate, train_batchwise, train_bitwise

__version__ = "0.1.0"

__all__ = [
    "Arch", "BitRanges", "BNPolicy", "ConfigError", "CoresetPlan", "Dataset", "FULL_PRECISION",
    "MultiBitModel", "QuantSpec", "RunConfig", "ScoreMatrix", "Tensor", "TrainConfig",
    "backward", "bias_correct", "bn_adapt", "build_model", "build_plan", "child_forward",
    "dorefa_quantize", "evaluate", "load_checkpoint", "load_cifar10_bin", "load_config",
    "load_mnist_idx", "normalize_scores", "sample_coreset", "sampling_probabilities",
    "save_checkpoint", "score_baseline", "score_bitwise_dynamics", "spearman",
    "statsq_quantize", "synth_blobs", "train_batchwise", "train_bitwise", "validate_config",
]
