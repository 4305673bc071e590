"""Noise-conditioned score network and denoising score matching.

The network is ``s(x; sigma) = gamma(x) / sigma`` with ``gamma`` a plain dense
net, so the activation pattern (and hence the affine partition in ReLU mode)
does not depend on sigma.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .autodiff import DenseLayer, Tape, mlp_tape

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Raised when a training loss stops being finite."""


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64).reshape(-1)
        if len(s) < 1 or np.any(s <= 0) or np.any(np.diff(s) >= 0):
            raise ValueError("sigmas must be positive and strictly decreasing")
        if len(s) > 2:
            ratios = s[1:] / s[:-1]
            if np.max(np.abs(ratios / ratios[0] - 1.0)) > 1e-10:
                raise ValueError("sigmas are not geometric")
        object.__setattr__(self, "sigmas", s)

    def __len__(self) -> int:
        return len(self.sigmas)

    def __getitem__(self, k):
        return self.sigmas[k]

    def to_dict(self) -> dict:
        return {"sigma_max": float(self.sigmas[0]), "sigma_min": float(self.sigmas[-1]), "L": len(self)}


def geometric_schedule(sigma_max: float, sigma_min: float, L: int) -> NoiseSchedule:
    if not (sigma_max > sigma_min > 0):
        raise ValueError(f"need sigma_max > sigma_min > 0, got {sigma_max}, {sigma_min}")
    if L < 2:
        raise ValueError("need at least two noise levels")
    ratio = (sigma_min / sigma_max) ** (1.0 / (L - 1))
    sig = sigma_max * ratio ** np.arange(L)
    sig[-1] = sigma_min
    return NoiseSchedule(sig)


def init_layers(dims: list[int], rng: np.random.Generator, zero_last: bool = False) -> list[DenseLayer]:
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.standard_normal((b, a)) / np.sqrt(a)
        if zero_last and i == len(dims) - 2:
            w = np.zeros((b, a))
        layers.append(DenseLayer(w, np.zeros(b)))
    return layers


CONDITIONING = ("inverse_sigma", "sigma_input")


@dataclass
class ScoreNet:
    """Dense score model ``s(y; sigma) = gamma(y) / sigma``.

    With ``conditioning="sigma_input"`` the network also sees ``log sigma`` as
    an extra input feature, i.e. ``gamma(y, log sigma) / sigma``. That mode can
    represent scores whose shape changes with sigma, but its affine partition
    depends on sigma, so theory-mode checks use the default.
    """

    layers: list[DenseLayer]
    activation: str = "tanh"
    conditioning: str = "inverse_sigma"

    def __post_init__(self):
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"activation must be 'tanh' or 'relu', got {self.activation!r}")
        if self.conditioning not in CONDITIONING:
            raise ValueError(f"conditioning must be one of {CONDITIONING}, got {self.conditioning!r}")
        extra = 1 if self.conditioning == "sigma_input" else 0
        if self.layers[0].in_dim != self.layers[-1].out_dim + extra:
            raise ValueError("score network must map R^d to R^d")

    @classmethod
    def create(cls, dim: int, hidden=(64, 64), activation="tanh", seed: int = 0,
               zero_last=False, conditioning="inverse_sigma"):
        rng = np.random.default_rng(seed)
        extra = 1 if conditioning == "sigma_input" else 0
        return cls(init_layers([dim + extra, *hidden, dim], rng, zero_last), activation, conditioning)

    @property
    def dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return checkpoint.dims_of(self.layers)

    def _features(self, y, sigma) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if self.conditioning == "inverse_sigma":
            return y
        logsig = np.broadcast_to(np.log(np.asarray(sigma, dtype=np.float64)), y.shape[:-1] + (1,))
        return np.concatenate([y, logsig], axis=-1)

    def gamma(self, y, sigma=None) -> np.ndarray:
        """Network output before the 1/sigma scaling.

        ``sigma`` is only read in ``sigma_input`` mode.
        """
        if self.conditioning == "sigma_input" and sigma is None:
            raise ValueError("sigma_input conditioning needs sigma")
        h = self._features(y, sigma)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = np.tanh(h) if self.activation == "tanh" else np.maximum(h, 0.0)
        return h

    def score(self, y, sigma):
        return self.gamma(y, sigma) / sigma

    def tape(self, sigma) -> tuple[Tape, int]:
        """Tape whose root is s(y; sigma); its input is ``self._features(y, sigma)``."""
        tape, g = mlp_tape(self.layers, self.activation)
        return tape, tape.scale(g, 1.0 / np.asarray(sigma, dtype=np.float64))

    def score_vjp(self, y, sigma, v):
        tape, _ = self.tape(sigma)
        tape.forward(self._features(y, sigma))
        tape.backward(seed=np.asarray(v, dtype=np.float64))
        return tape.gradient("input")[..., : self.dim]

    def copy(self) -> "ScoreNet":
        return ScoreNet([layer.copy() for layer in self.layers], self.activation, self.conditioning)

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def to_dict(self, schedule: NoiseSchedule | None = None, seeds: dict | None = None) -> dict:
        return {
            "version": checkpoint.VERSION,
            "kind": "score",
            "dims": self.dims,
            "activation": self.activation,
            "conditioning": self.conditioning,
            "layers": checkpoint.layers_to_dict(self.layers),
            "schedule": schedule.to_dict() if schedule is not None else {},
            "seeds": seeds or {},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ScoreNet":
        net = cls(
            checkpoint.layers_from_dict(payload["layers"]),
            payload.get("activation", "tanh"),
            payload.get("conditioning", "inverse_sigma"),
        )
        if payload.get("dims") and list(payload["dims"]) != net.dims:
            raise ValueError("checkpoint dims do not match its layers")
        return net

    def save(self, path, schedule=None, seeds=None) -> None:
        checkpoint.write_json(path, self.to_dict(schedule, seeds))

    @classmethod
    def load(cls, path) -> "ScoreNet":
        return cls.from_dict(checkpoint.read_json(path))


def _dsm_tape(net: ScoreNet, batch, sigma, noise) -> tuple[Tape, np.ndarray]:
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    if noise.shape != batch.shape:
        raise ValueError(f"noise shape {noise.shape} does not match batch shape {batch.shape}")
    sig = np.asarray(sigma, dtype=np.float64)
    if sig.ndim == 1:
        sig = sig[:, None]
    tape, s = net.tape(sig)
    t = tape.add(tape.const(noise), tape.scale(s, sig))
    tape.scale(tape.sum_squares(t), 1.0 / batch.shape[0])
    return tape, net._features(batch + sig * noise, sig)


def dsm_loss(net: ScoreNet, batch, sigma, noise) -> float:
    """Mean of ||xi + sigma s(x + sigma xi; sigma)||^2 over the batch.

    ``sigma`` is a scalar or one value per row.
    """
    tape, y = _dsm_tape(net, batch, sigma, noise)
    return tape.forward(y)


def dsm_loss_and_grads(net: ScoreNet, batch, sigma, noise):
    tape, y = _dsm_tape(net, batch, sigma, noise)
    loss = tape.forward(y)
    return loss, tape.gradient("parameters")


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 1000
    step_size: float = 0.02
    param_seed: int = 0
    noise_seed: int = 1

    def __post_init__(self):
        if self.batch_size <= 0 or self.epochs <= 0 or self.step_size <= 0:
            raise ValueError("batch_size, epochs and step_size must be positive")
        if self.param_seed < 0 or self.noise_seed < 0:
            raise ValueError("seeds must be non-negative")

    def seeds(self) -> dict:
        return {"param_seed": self.param_seed, "noise_seed": self.noise_seed}


@dataclass
class TrainResult:
    net: ScoreNet
    losses: list[float] = field(default_factory=list)


def train(net: ScoreNet, data, schedule: NoiseSchedule, cfg: TrainConfig) -> TrainResult:
    """Plain SGD on the DSM loss, one noise level drawn per sample.

    ``net`` is not modified; the returned copy holds the trained parameters and
    the per-epoch mean loss.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    net = net.copy()
    rng = np.random.Generator(np.random.Philox(cfg.noise_seed))
    n = data.shape[0]
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = data[idx]
            sig = schedule.sigmas[rng.integers(len(schedule), size=len(idx))]
            xi = rng.standard_normal(x.shape)
            loss, grads = dsm_loss_and_grads(net, x, sig, xi)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"DSM loss became {loss} at epoch {epoch}")
            for layer, (dw, db) in zip(net.layers, grads):
                layer.weight -= cfg.step_size * dw
                layer.bias -= cfg.step_size * db
            total += loss * len(idx)
        losses.append(total / n)
        if epoch % 50 == 0:
            log.debug("epoch %d dsm loss %.5f", epoch, losses[-1])
    return TrainResult(net, losses)
