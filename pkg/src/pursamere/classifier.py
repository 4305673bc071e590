"""Toy dense classifier trained on clean plus purified samples."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint
from .autodiff import DenseLayer, mlp_tape
from .purify import AdamState, PurifyConfig, purify_many
from .score import TrainingDiverged, init_layers


@dataclass
class Classifier:
    layers: list[DenseLayer]
    activation: str = "tanh"

    def __post_init__(self):
        if self.layers[-1].out_dim < 2:
            raise ValueError("need at least two classes")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"activation must be 'tanh' or 'relu', got {self.activation!r}")

    @classmethod
    def create(cls, dim: int, n_classes: int = 2, hidden=(32, 32), seed: int = 0, activation="tanh"):
        rng = np.random.default_rng(seed)
        return cls(init_layers([dim, *hidden, n_classes], rng), activation)

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_dim

    def logits(self, x) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = np.tanh(h) if self.activation == "tanh" else np.maximum(h, 0.0)
        return h

    def predict(self, x):
        z = self.logits(x)
        out = np.argmax(z, axis=-1)
        return int(out) if np.ndim(out) == 0 else out

    def _tape(self, y):
        tape, z = mlp_tape(self.layers, self.activation)
        tape.cross_entropy(z, np.atleast_1d(y))
        return tape

    def loss(self, x, y) -> float:
        return self._tape(y).forward(np.atleast_2d(x))

    def loss_grad(self, x, y):
        """Cross-entropy and its gradient with respect to the input."""
        x = np.asarray(x, dtype=np.float64)
        tape = self._tape(y)
        loss = tape.forward(np.atleast_2d(x))
        return loss, tape.gradient("input").reshape(x.shape)

    def loss_param_grads(self, x, y):
        tape = self._tape(y)
        loss = tape.forward(np.atleast_2d(x))
        return loss, tape.gradient("parameters")

    def accuracy(self, xs, ys) -> float:
        return float(np.mean(self.predict(np.atleast_2d(xs)) == np.asarray(ys)))

    def copy(self) -> "Classifier":
        return Classifier([layer.copy() for layer in self.layers], self.activation)

    def to_dict(self, seeds: dict | None = None) -> dict:
        return {"version": checkpoint.VERSION, "kind": "classifier", "dims": checkpoint.dims_of(self.layers),
                "activation": self.activation, "layers": checkpoint.layers_to_dict(self.layers),
                "seeds": seeds or {}}

    @classmethod
    def from_dict(cls, payload: dict) -> "Classifier":
        if payload.get("kind") != "classifier":
            raise ValueError("not a classifier checkpoint")
        return cls(checkpoint.layers_from_dict(payload["layers"]), payload.get("activation", "tanh"))

    def save(self, path, seeds=None) -> None:
        checkpoint.write_json(path, self.to_dict(seeds))

    @classmethod
    def load(cls, path) -> "Classifier":
        return cls.from_dict(checkpoint.read_json(path))


@dataclass
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray
    x_pur: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if len(self.x) != len(self.y):
            raise ValueError("samples and labels have different lengths")
        if np.any(self.x < 0) or np.any(self.x > 1):
            raise ValueError("samples must lie in [0, 1]^d")
        if self.x_pur is not None:
            self.x_pur = np.atleast_2d(np.asarray(self.x_pur, dtype=np.float64))
            if self.x_pur.shape != self.x.shape:
                raise ValueError("purified samples must align with the originals")

    def __len__(self) -> int:
        return len(self.y)


def sample_class_mixture(class_specs, n: int, rng: np.random.Generator) -> LabeledDataset:
    """``n`` samples per class from per-class GMMs, clipped to the unit box."""
    xs, ys = [], []
    for c, spec in enumerate(class_specs):
        xs.append(np.clip(spec.sample(n, rng), 0.0, 1.0))
        ys.append(np.full(n, c))
    order = rng.permutation(n * len(class_specs))
    return LabeledDataset(np.concatenate(xs)[order], np.concatenate(ys)[order])


def augmented_loss(h: Classifier, x, x_pur, y, with_grads: bool = False):
    """0.5 * CE(h(x), y) + 0.5 * CE(h(x_pur), y)."""
    l1, g1 = h.loss_param_grads(x, y)
    l2, g2 = h.loss_param_grads(x_pur, y)
    loss = 0.5 * l1 + 0.5 * l2
    if not with_grads:
        return loss
    grads = [(0.5 * a + 0.5 * c, 0.5 * b + 0.5 * d) for (a, b), (c, d) in zip(g1, g2)]
    return loss, grads


def build_augmented_dataset(data: LabeledDataset, model, schedule, cfg: PurifyConfig, threads: int = 1):
    """Pair every training sample with its purified version (SAM switched off)."""
    cfg = replace(cfg, sam_enabled=False)
    x_pur = purify_many(data.x, model, schedule, cfg, threads)
    return LabeledDataset(data.x, data.y, x_pur)


def train_classifier(data: LabeledDataset, epochs: int = 100, seed: int = 0, hidden=(32, 32),
                     batch_size: int = 64, lr: float = 0.01) -> Classifier:
    """Minibatch Adam on the (augmented, when x_pur is present) cross-entropy."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    n_classes = max(int(data.y.max()) + 1, 2)
    h = Classifier.create(data.x.shape[1], n_classes, hidden, seed)
    rng = np.random.default_rng(seed + 1)
    opt = [AdamState(lr) for _ in range(2 * len(h.layers))]
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), batch_size):
            idx = order[start : start + batch_size]
            if data.x_pur is not None:
                loss, grads = augmented_loss(h, data.x[idx], data.x_pur[idx], data.y[idx], with_grads=True)
            else:
                loss, grads = h.loss_param_grads(data.x[idx], data.y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"classifier loss became {loss} at epoch {epoch}")
            for i, (layer, (dw, db)) in enumerate(zip(h.layers, grads)):
                layer.weight = opt[2 * i].step(layer.weight, dw)
                layer.bias = opt[2 * i + 1].step(layer.bias, db)
    return h
