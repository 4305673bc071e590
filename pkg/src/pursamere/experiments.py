"""Reusable experiment pipelines on the toy fixtures.

Every pipeline is a pure function of its configuration and seed, so the CLI
and the acceptance suite share one code path.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .attacks import AttackConfig, RobustnessReport, evaluate_robustness
from .classifier import (
    Classifier,
    LabeledDataset,
    build_augmented_dataset,
    sample_class_mixture,
    train_classifier,
)
from .ere import NoiseBank
from .gmm import GmmSpec, smoothed_log_density
from .purify import Purifier, PurifyConfig
from .score import NoiseSchedule, ScoreNet, TrainConfig, geometric_schedule, train

TWO_CLASS_SPECS = (GmmSpec([1.0], [[0.3, 0.3]], [0.05]), GmmSpec([1.0], [[0.7, 0.7]], [0.05]))


def derive_seed(seed: int, name: str) -> int:
    """Independent 32-bit seed for a named pipeline stage."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def split_dataset(class_specs, n_train: int, n_test: int, seed: int):
    train_d = sample_class_mixture(class_specs, n_train, np.random.default_rng(derive_seed(seed, "train-data")))
    test_d = sample_class_mixture(class_specs, n_test, np.random.default_rng(derive_seed(seed, "test-data")))
    return train_d, test_d


# -- Bayes reference --------------------------------------------------------

def bayes_predict(class_specs, x) -> np.ndarray:
    """Equal-prior Bayes decision from the class densities."""
    x = np.atleast_2d(x)
    ll = np.stack([smoothed_log_density(s, x, 0.0) for s in class_specs], axis=1)
    return np.argmax(ll, axis=1)


def bayes_robust_accuracy(class_specs, xs, ys, budget: float, n_dirs: int = 720) -> dict:
    """Clean and l2-robust accuracy of the Bayes classifier by brute force (d = 2).

    A point counts as robust if its Bayes label is correct at the point and at
    every perturbation on a ring of ``n_dirs`` directions at radii
    budget/4 .. budget (clipped to the box).
    """
    xs = np.atleast_2d(xs)
    if xs.shape[1] != 2:
        raise ValueError("brute-force Bayes check is implemented for d = 2")
    ys = np.asarray(ys)
    clean = bayes_predict(class_specs, xs) == ys
    angles = np.linspace(0, 2 * np.pi, n_dirs, endpoint=False)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    robust = clean.copy()
    for radius in budget * np.array([0.25, 0.5, 0.75, 1.0]):
        for i in np.nonzero(robust)[0]:
            pts = np.clip(xs[i] + radius * dirs, 0.0, 1.0)
            robust[i] = bool(np.all(bayes_predict(class_specs, pts) == ys[i]))
    out = {"bayes_clean_accuracy": float(clean.mean()), "bayes_robust_accuracy": float(robust.mean())}
    if len(class_specs) == 2 and all(s.n_components == 1 for s in class_specs) and class_specs[0].stds[0] == class_specs[1].stds[0]:
        gap = np.linalg.norm(np.asarray(class_specs[0].means[0]) - np.asarray(class_specs[1].means[0]))
        std = class_specs[0].stds[0]
        out["bayes_robust_accuracy_analytic"] = float(norm.cdf((gap / 2 - budget) / std))
    return out


# -- end-to-end pipeline ----------------------------------------------------

@dataclass
class PipelineConfig:
    class_specs: tuple = TWO_CLASS_SPECS
    n_train_per_class: int = 500
    n_test_per_class: int = 100
    sigma_max: float = 0.2
    sigma_min: float = 0.01
    levels: int = 30
    score_hidden: tuple = (64, 64)
    conditioning: str = "sigma_input"
    score_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=300))
    rho_pur: float = 0.3
    rho_sam: float = 0.05
    m: int = 4
    antithetic: bool = False
    lr_rule: str = "decreasing"
    eta_max: float = 0.02
    eta_min: float = 0.0002
    classifier_epochs: int = 100
    classifier_hidden: tuple = (32, 32)
    augment: bool = True
    seed: int = 0

    def schedule(self) -> NoiseSchedule:
        return geometric_schedule(self.sigma_max, self.sigma_min, self.levels)

    def purify_config(self, rho_pur: float | None = None) -> PurifyConfig:
        bank = NoiseBank(derive_seed(self.seed, "purify-bank"), self.levels, self.m, self.antithetic)
        return PurifyConfig(self.rho_pur if rho_pur is None else rho_pur, self.rho_sam, bank,
                            self.eta_max, self.eta_min, lr_rule=self.lr_rule)


@dataclass
class Pipeline:
    cfg: PipelineConfig
    train_data: LabeledDataset
    test_data: LabeledDataset
    score: ScoreNet | None
    score_losses: list
    classifier: Classifier

    def purifier(self, rho_pur: float | None = None) -> Purifier:
        return Purifier(self.score, self.cfg.schedule(), self.cfg.purify_config(rho_pur))


def train_score_model(data_x, cfg: PipelineConfig):
    net = ScoreNet.create(data_x.shape[1], cfg.score_hidden, seed=derive_seed(cfg.seed, "score-init"),
                          conditioning=cfg.conditioning)
    tc = TrainConfig(cfg.score_train.batch_size, cfg.score_train.epochs, cfg.score_train.step_size,
                     derive_seed(cfg.seed, "score-init"), derive_seed(cfg.seed, "score-noise"))
    return train(net, data_x, cfg.schedule(), tc)


def build_pipeline(cfg: PipelineConfig, threads: int = 1, score: ScoreNet | None = None) -> Pipeline:
    """Sample data, train the score model (if augmenting and none is given) and the classifier."""
    train_d, test_d = split_dataset(cfg.class_specs, cfg.n_train_per_class, cfg.n_test_per_class, cfg.seed)
    losses = []
    if score is None and cfg.augment:
        res = train_score_model(train_d.x, cfg)
        score, losses = res.net, res.losses
    data = train_d
    if cfg.augment:
        data = build_augmented_dataset(train_d, score, cfg.schedule(), cfg.purify_config(), threads)
    h = train_classifier(data, cfg.classifier_epochs, derive_seed(cfg.seed, "classifier"), cfg.classifier_hidden)
    return Pipeline(cfg, train_d, test_d, score, losses, h)


def robustness_gain(pipe: Pipeline, attack: AttackConfig, threads: int = 1) -> dict[str, RobustnessReport]:
    """Attack the classifier with and without purification on the test split."""
    x, y = pipe.test_data.x, pipe.test_data.y
    return {
        "none": evaluate_robustness(x, y, pipe.classifier, None, attack, threads),
        "purified": evaluate_robustness(x, y, pipe.classifier, pipe.purifier(), attack, threads),
    }
