"""Adversarial purification by sharpness-aware minimization of the expected
reconstruction error of a score model, with toy-scale oracles and attacks."""

from .attacks import AttackConfig, bpda_det, evaluate_robustness, pgd
from .classifier import Classifier, train_classifier
from .ere import NoiseBank, ere_grad, ere_value
from .gmm import GmmScore, GmmSpec, exact_ere, exact_score
from .purify import Purifier, PurifyConfig, purify
from .score import NoiseSchedule, ScoreNet, TrainConfig, geometric_schedule, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "Classifier", "GmmScore", "GmmSpec", "NoiseBank", "NoiseSchedule", "Purifier",
    "PurifyConfig", "ScoreNet", "TrainConfig", "bpda_det", "ere_grad", "ere_value", "evaluate_robustness",
    "exact_ere", "exact_score", "geometric_schedule", "pgd", "purify", "train", "train_classifier",
]
