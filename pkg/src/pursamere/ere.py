"""Deterministic Monte Carlo estimate of the expected reconstruction error.

    R_hat(x; sigma_k) = (1/m) sum_i ||xi_ki + sigma_k s(x + sigma_k xi_ki; sigma_k)||^2

The noise xi_ki comes from a :class:`NoiseBank`: a Philox (counter-based)
stream keyed by a per-level 64-bit seed, so row i of level k is a pure function
of (master seed, k, i, d) and never depends on who asks for it or when.

Score models are duck-typed: anything with ``score(y, sigma)`` and
``score_vjp(y, sigma, v)`` works (the exact mixture score, a constructed field,
or a :class:`~pursamere.score.ScoreNet`).
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .score import ScoreNet

GENERATOR = "numpy-philox4x64"


@dataclass
class NoiseBank:
    master_seed: int
    L: int
    m: int = 4
    antithetic: bool = False
    level_seeds: list[int] = field(default_factory=list)
    generator: str = GENERATOR

    def __post_init__(self):
        if self.m < 1 or self.L < 1:
            raise ValueError("need m >= 1 and L >= 1")
        if self.generator != GENERATOR:
            raise ValueError(f"unsupported generator {self.generator!r}")
        if not self.level_seeds:
            ss = np.random.SeedSequence(int(self.master_seed))
            self.level_seeds = [int(v) for v in ss.generate_state(self.L, dtype=np.uint64)]
        if len(self.level_seeds) != self.L:
            raise ValueError("need one seed per level")
        self._cache: dict = {}
        self._lock = threading.Lock()

    def noise(self, level: int, dim: int, m: int | None = None) -> np.ndarray:
        """The (m, dim) standard normal block of ``level`` (1-based)."""
        if not 1 <= level <= self.L:
            raise ValueError(f"level {level} outside [1, {self.L}]")
        m = self.m if m is None else m
        key = (level, dim, m)
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            return cached
        rng = np.random.Generator(np.random.Philox(key=self.level_seeds[level - 1]))
        if self.antithetic:
            half = rng.standard_normal(((m + 1) // 2, dim))
            xi = np.empty((2 * half.shape[0], dim))
            xi[0::2] = half
            xi[1::2] = -half
            xi = xi[:m]
        else:
            xi = rng.standard_normal((m, dim))
        xi.setflags(write=False)
        with self._lock:
            self._cache[key] = xi
        return xi

    def fresh(self, draw: int) -> "NoiseBank":
        """An independent bank for the ``draw``-th stochastic repetition."""
        seed = int(np.random.SeedSequence([int(self.master_seed), int(draw)]).generate_state(1, np.uint64)[0])
        return NoiseBank(seed, self.L, self.m, self.antithetic)

    def to_dict(self) -> dict:
        return {
            "generator": self.generator,
            "master_seed": int(self.master_seed),
            "level_seeds": [int(s) for s in self.level_seeds],
            "m": self.m,
            "antithetic": self.antithetic,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseBank":
        seeds = [int(s) for s in d["level_seeds"]]
        return cls(int(d["master_seed"]), len(seeds), int(d["m"]), bool(d.get("antithetic", False)),
                   seeds, d.get("generator", GENERATOR))


@dataclass
class EreValueGrad:
    value: float
    grad: np.ndarray
    sigma: float
    level: int | None = None


def ere_value_grad_at(model, x, sigma: float, xi: np.ndarray, need_grad: bool = True):
    """Value and x-gradient of R_hat for an explicit noise block."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    m = xi.shape[0]
    y = x[None, :] + sigma * xi
    if isinstance(model, ScoreNet):
        tape, s = model.tape(sigma)
        t = tape.add(tape.const(xi), tape.scale(s, sigma))
        tape.scale(tape.sum_squares(t), 1.0 / m)
        value = tape.forward(model._features(y, sigma))
        if not need_grad:
            return value, None
        gy = tape.gradient("input")[:, : x.size]
        return value, gy.sum(axis=0)
    r = xi + sigma * model.score(y, sigma)
    value = float(np.sum(r * r) / m)
    if not need_grad:
        return value, None
    gy = model.score_vjp(y, sigma, (2.0 * sigma / m) * r)
    return value, gy.sum(axis=0)


def ere_value(model, x, level: int, bank: NoiseBank, sigmas) -> float:
    """R_hat at ``level`` (1-based) with ``sigma = sigmas[level - 1]``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    sigma = float(sigmas[level - 1])
    value, _ = ere_value_grad_at(model, x, sigma, bank.noise(level, x.size), need_grad=False)
    return value


def ere_grad(model, x, level: int, bank: NoiseBank, sigmas) -> EreValueGrad:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    sigma = float(sigmas[level - 1])
    value, grad = ere_value_grad_at(model, x, sigma, bank.noise(level, x.size))
    return EreValueGrad(value, grad, sigma, level)


def mc_convergence_probe(model, x, sigma: float, m_list, reference: float,
                         n_rep: int = 200, master_seed: int = 0) -> dict:
    """Error of R_hat against a reference value for several sample counts.

    Each m is repeated over ``n_rep`` independent banks; the table reports the
    mean absolute error and the standard deviation of the error, plus the
    log-log slope of that standard deviation against m.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    rows = []
    for m in m_list:
        errs = np.empty(n_rep)
        for r in range(n_rep):
            bank = NoiseBank(master_seed * 1_000_003 + r, 1, m)
            value, _ = ere_value_grad_at(model, x, sigma, bank.noise(1, x.size), need_grad=False)
            errs[r] = value - reference
        rows.append({"m": int(m), "mean_abs_error": float(np.mean(np.abs(errs))),
                     "error_std": float(np.std(errs, ddof=1))})
    ms = np.log([row["m"] for row in rows])
    sds = np.log([row["error_std"] for row in rows])
    slope = float(np.polyfit(ms, sds, 1)[0]) if len(rows) > 1 else float("nan")
    return {"rows": rows, "slope": slope}
