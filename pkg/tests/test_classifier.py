"""Toy classifier, augmented objective and training loop."""
import json

import numpy as np
import pytest

from pursamere.classifier import (
    Classifier,
    LabeledDataset,
    augmented_loss,
    build_augmented_dataset,
    sample_class_mixture,
    train_classifier,
)
from pursamere.ere import NoiseBank
from pursamere.experiments import TWO_CLASS_SPECS
from pursamere.gmm import GmmScore, GmmSpec
from pursamere.purify import PurifyConfig
from pursamere.score import TrainingDiverged, geometric_schedule


@pytest.fixture(scope="module")
def clean_split():
    rng = np.random.default_rng(0)
    return sample_class_mixture(TWO_CLASS_SPECS, 500, rng), sample_class_mixture(TWO_CLASS_SPECS, 500, rng)


class TestClassifier:
    def test_relu_activation_consistent_with_tape(self):
        h = Classifier.create(2, hidden=(8,), seed=0, activation="relu")
        x = np.array([[0.2, 0.9], [0.6, 0.1]])
        y = np.array([0, 1])
        z = h.logits(x)
        expected = np.mean(np.log(np.exp(z).sum(1)) - z[np.arange(2), y])
        assert h.loss(x, y) == pytest.approx(expected, rel=1e-12)

    def test_input_gradient_fd(self):
        h = Classifier.create(3, seed=1)
        x = np.array([0.3, 0.5, 0.8])
        _, g = h.loss_grad(x, 1)
        eps = 1e-6
        fd = [(h.loss(x + eps * e, 1) - h.loss(x - eps * e, 1)) / (2 * eps) for e in np.eye(3)]
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-10)

    def test_checkpoint(self, tmp_path):
        h = Classifier.create(2, seed=3)
        h.save(tmp_path / "c.json", {"seed": 3})
        assert json.loads((tmp_path / "c.json").read_text())["kind"] == "classifier"
        g = Classifier.load(tmp_path / "c.json")
        x = np.random.default_rng(0).uniform(0, 1, (5, 2))
        assert np.array_equal(h.logits(x), g.logits(x))

    def test_rejects_other_checkpoints(self):
        with pytest.raises(ValueError):
            Classifier.from_dict({"kind": "score"})


class TestAugmentedLoss:
    def test_reduces_to_plain_loss(self):
        h = Classifier.create(2, seed=4)
        x = np.random.default_rng(1).uniform(0, 1, (6, 2))
        y = np.array([0, 1, 0, 1, 1, 0])
        assert augmented_loss(h, x, x, y) == pytest.approx(h.loss(x, y), rel=1e-14)

    def test_uniform_logits_give_log2(self):
        h = Classifier.create(2, seed=5)
        h.layers[-1].weight[:] = 0.0
        h.layers[-1].bias[:] = 0.0
        x = np.random.default_rng(2).uniform(0, 1, (4, 2))
        assert augmented_loss(h, x, 1 - x, np.array([0, 1, 1, 0])) == pytest.approx(np.log(2), abs=1e-15)

    def test_is_exact_average(self):
        h = Classifier.create(2, seed=6)
        rng = np.random.default_rng(3)
        x, xp = rng.uniform(0, 1, (8, 2)), rng.uniform(0, 1, (8, 2))
        y = rng.integers(0, 2, 8)
        assert abs(augmented_loss(h, x, xp, y) - 0.5 * (h.loss(x, y) + h.loss(xp, y))) < 1e-12

    def test_parameter_gradient_fd(self):
        h = Classifier.create(2, hidden=(5,), seed=7)
        rng = np.random.default_rng(4)
        x, xp = rng.uniform(0, 1, (6, 2)), rng.uniform(0, 1, (6, 2))
        y = rng.integers(0, 2, 6)
        _, grads = augmented_loss(h, x, xp, y, with_grads=True)
        eps = 1e-6
        for li, idx in [(0, (2, 1)), (1, (1, 3))]:
            w = h.layers[li].weight
            orig = w[idx]
            w[idx] = orig + eps
            up = augmented_loss(h, x, xp, y)
            w[idx] = orig - eps
            dn = augmented_loss(h, x, xp, y)
            w[idx] = orig
            assert grads[li][0][idx] == pytest.approx((up - dn) / (2 * eps), rel=1e-6)


class TestAugmentedDataset:
    SPEC = GmmSpec([1.0], [[0.5, 0.5]], [0.1])
    SCHED = geometric_schedule(0.3, 0.01, 10)

    def _data(self):
        x = np.clip(self.SPEC.sample(40, np.random.default_rng(5)), 0, 1)
        return LabeledDataset(x, np.zeros(40, dtype=int))

    def test_purification_shrinks_spread(self):
        data = self._data()
        aug = build_augmented_dataset(data, GmmScore(self.SPEC), self.SCHED, PurifyConfig(0.3, 0.05, NoiseBank(0, 10)))
        assert aug.x_pur.std(axis=0).max() < data.x.std(axis=0).min()
        assert np.array_equal(aug.x, data.x)

    def test_zero_radius_is_identity(self):
        data = self._data()
        aug = build_augmented_dataset(data, GmmScore(self.SPEC), self.SCHED, PurifyConfig(0.0, bank=NoiseBank(0, 10)))
        assert np.array_equal(aug.x_pur, data.x)

    def test_deterministic(self):
        data = self._data()
        cfg = PurifyConfig(0.2, bank=NoiseBank(1, 10))
        a = build_augmented_dataset(data, GmmScore(self.SPEC), self.SCHED, cfg, threads=1)
        b = build_augmented_dataset(data, GmmScore(self.SPEC), self.SCHED, cfg, threads=4)
        assert np.array_equal(a.x_pur, b.x_pur)

    def test_misaligned_rejected(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((3, 2)), np.zeros(3), np.zeros((2, 2)))


class TestTraining:
    def test_separable_toy_task(self, clean_split):
        train, test = clean_split
        h = train_classifier(train, epochs=30, seed=0)
        assert h.accuracy(test.x, test.y) >= 0.98

    def test_permuted_labels_stay_at_chance(self, clean_split):
        train, test = clean_split
        shuffled = LabeledDataset(train.x, np.random.default_rng(9).permutation(train.y))
        h = train_classifier(shuffled, epochs=30, seed=0)
        # held-out labels must be independent of x too, otherwise the two clusters carry signal
        assert abs(h.accuracy(test.x, np.random.default_rng(10).permutation(test.y)) - 0.5) <= 0.05

    def test_deterministic(self, clean_split):
        train, _ = clean_split
        a = train_classifier(train, epochs=2, seed=1)
        b = train_classifier(train, epochs=2, seed=1)
        assert all(np.array_equal(p.weight, q.weight) for p, q in zip(a.layers, b.layers))

    def test_non_finite_loss_aborts(self):
        x = np.full((4, 2), 0.5)
        data = LabeledDataset(x, np.array([0, 1, 0, 1]), np.full((4, 2), np.nan))
        with pytest.raises(TrainingDiverged), np.errstate(invalid="ignore"):
            train_classifier(data, epochs=1)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train_classifier(LabeledDataset(np.zeros((0, 2)), np.zeros(0, dtype=int)))
