"""Purification by sharpness-aware minimization of the reconstruction error.

For each noise level k = 1..L (largest sigma first):

1. gradient of R_hat at the current iterate,
2. SAM ascent of length rho_sam along the normalized gradient, clamped to the box,
3. gradient of R_hat at the ascended point,
4. Adam step from the current iterate using that gradient,
5. projection onto [0, 1]^d intersected with the l2 ball around the input,
6. learning-rate update.

One Adam state is shared across levels. All randomness comes from the
configured :class:`~pursamere.ere.NoiseBank`, so the map is deterministic.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .ere import NoiseBank, ere_grad

GRAD_FLOOR = 1e-12


class PurificationAborted(FloatingPointError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass
class PurifyConfig:
    rho_pur: float
    rho_sam: float = 0.0
    bank: NoiseBank | None = None
    eta_max: float = 0.1
    eta_min: float = 0.001
    sam_enabled: bool = True
    q: int = 2
    # "decreasing": eta_max at the largest sigma down to eta_min at the smallest.
    # "increasing": the ramp written inside the pseudo-code loop, applied after each step.
    lr_rule: str = "decreasing"

    def __post_init__(self):
        if not self.rho_pur >= 0:
            raise ValueError("rho_pur must be non-negative")
        if self.rho_sam < 0:
            raise ValueError("rho_sam must be non-negative")
        if not (self.eta_max >= self.eta_min > 0):
            raise ValueError("need eta_max >= eta_min > 0")
        if self.q != 2:
            raise ValueError("only the l2 purification constraint (q = 2) is supported")
        if self.lr_rule not in ("decreasing", "increasing"):
            raise ValueError(f"unknown lr_rule {self.lr_rule!r}")

    @property
    def sam_active(self) -> bool:
        return self.sam_enabled and self.rho_sam > 0

    def to_dict(self) -> dict:
        return {
            "rho_pur": self.rho_pur,
            "rho_sam": self.rho_sam,
            "eta_max": self.eta_max,
            "eta_min": self.eta_min,
            "sam_enabled": self.sam_enabled,
            "q": self.q,
            "lr_rule": self.lr_rule,
            "bank": self.bank.to_dict() if self.bank is not None else None,
        }


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class LevelRecord:
    level: int
    sigma: float
    lr: float
    ere_value: float
    x: np.ndarray
    sam_skipped: bool
    proj_ball_active: bool
    proj_box_active: bool


@dataclass
class PurifyTrace:
    records: list[LevelRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            d = len(self.records[0].x) if self.records else 0
            w.writerow(["level", "sigma", "lr", "ere_value", "proj_ball_active", "proj_box_active"]
                       + [f"x{i}" for i in range(d)])
            for r in self.records:
                w.writerow([r.level, repr(r.sigma), repr(r.lr), repr(r.ere_value),
                            int(r.proj_ball_active), int(r.proj_box_active)] + [repr(float(v)) for v in r.x])


def lr_schedule(k: int, L: int, eta_max: float = 0.1, eta_min: float = 0.001) -> float:
    """Linearly decreasing step size, eta_max at level 1 and eta_min at level L."""
    if L == 1:
        return eta_max
    if not 1 <= k <= L:
        raise ValueError(f"level {k} outside [1, {L}]")
    return eta_max - (eta_max - eta_min) * (k - 1) / (L - 1)


def sam_ascent(x, grad, rho_sam: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(grad)
    if rho_sam == 0 or norm < GRAD_FLOOR:
        return x
    return np.clip(x + rho_sam * np.asarray(grad) / norm, 0.0, 1.0)


def _project(x, center, rho):
    diff = x - center
    dist = np.linalg.norm(diff)
    ball = dist > rho
    if ball:
        x = center + diff * (rho / dist) if dist > 0 else center.copy()
    clipped = np.clip(x, 0.0, 1.0)
    return clipped, ball, bool(np.any(clipped != x))


def project_ball_box(x, center, rho: float) -> np.ndarray:
    """Radial projection onto B_2(center, rho), then clamp to [0, 1]^d.

    For a center inside the box the clamp only shrinks |x_i - center_i|, so the
    result lies in both sets.
    """
    x = np.asarray(x, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    out, _, _ = _project(x, center, rho)
    return out


def purify(x_adv, model, schedule, cfg: PurifyConfig) -> tuple[np.ndarray, PurifyTrace]:
    x_adv = np.asarray(x_adv, dtype=np.float64).reshape(-1)
    if np.any(x_adv < 0) or np.any(x_adv > 1):
        raise ValueError("input must lie in [0, 1]^d")
    if cfg.bank is None:
        raise ValueError("PurifyConfig.bank is required")
    sigmas = np.asarray(getattr(schedule, "sigmas", schedule), dtype=np.float64)
    L = len(sigmas)
    if cfg.bank.L < L:
        raise ValueError(f"noise bank has {cfg.bank.L} levels, schedule has {L}")

    trace = PurifyTrace()
    x = x_adv.copy()
    adam = AdamState(lr=cfg.eta_max)
    for k in range(1, L + 1):
        if cfg.lr_rule == "decreasing":
            adam.lr = lr_schedule(k, L, cfg.eta_max, cfg.eta_min)
        lr_used = adam.lr

        g0 = ere_grad(model, x, k, cfg.bank, sigmas)
        skipped = False
        if cfg.sam_active:
            skipped = bool(np.linalg.norm(g0.grad) < GRAD_FLOOR)
            x_max = sam_ascent(x, g0.grad, cfg.rho_sam)
            g = ere_grad(model, x_max, k, cfg.bank, sigmas).grad
        else:
            g = g0.grad
        x_new = adam.step(x, g)
        if not np.all(np.isfinite(x_new)):
            raise PurificationAborted(f"non-finite iterate at level {k}", trace)
        x, ball, box = _project(x_new, x_adv, cfg.rho_pur)
        if np.linalg.norm(x - x_adv) > cfg.rho_pur + 1e-9 or np.any(x < 0) or np.any(x > 1):
            raise PurificationAborted(f"projection left the feasible set at level {k}", trace)
        trace.records.append(LevelRecord(k, g0.sigma, lr_used, g0.value, x.copy(), skipped, ball, box))

        if cfg.lr_rule == "increasing":
            adam.lr = cfg.eta_min + (cfg.eta_max - cfg.eta_min) * (k - 1) / max(L - 1, 1)
    return x, trace


@dataclass
class Purifier:
    """Callable deterministic purification map x -> purify(x)."""

    model: object
    schedule: object
    cfg: PurifyConfig

    def __call__(self, x) -> np.ndarray:
        return purify(x, self.model, self.schedule, self.cfg)[0]

    def with_bank(self, bank: NoiseBank) -> "Purifier":
        return Purifier(self.model, self.schedule, replace(self.cfg, bank=bank))

    def many(self, xs, threads: int = 1) -> np.ndarray:
        return purify_many(xs, self.model, self.schedule, self.cfg, threads)


def purify_many(xs, model, schedule, cfg: PurifyConfig, threads: int = 1) -> np.ndarray:
    """Purify rows independently; results are in input order for any thread count."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))

    def one(row):
        return purify(row, model, schedule, cfg)[0]

    if threads <= 1:
        return np.stack([one(row) for row in xs])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.stack(list(pool.map(one, xs)))
