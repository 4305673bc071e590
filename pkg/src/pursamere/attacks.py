"""PGD-family attacks, straight-through BPDA and EoT averaging.

Models are passed as a ``loss_grad(x, y) -> (loss, grad)`` callable and, where
a success flag is wanted, a ``predict(x) -> label`` callable. Purifiers are
plain callables ``x -> x_pur``.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

NORMS = ("inf", 2, 1)
DEFAULT_BUDGET = {"inf": 8 / 255, 2: 1.0, 1: 12.0}
THREATS = ("gray-box", "bpda-det")


def _norm_key(p):
    if p in ("inf", "linf", np.inf, float("inf")):
        return "inf"
    if p in (2, "2", "l2"):
        return 2
    if p in (1, "1", "l1"):
        return 1
    raise ValueError(f"unsupported norm {p!r}")


def pnorm(v, p) -> float:
    p = _norm_key(p)
    v = np.asarray(v, dtype=np.float64)
    if p == "inf":
        return float(np.max(np.abs(v))) if v.size else 0.0
    return float(np.sum(np.abs(v))) if p == 1 else float(np.linalg.norm(v))


@dataclass
class AttackConfig:
    norm: object = "inf"
    budget: float | None = None
    steps: int = 20
    step_size: float | None = None
    eot_samples: int = 1
    threat: str = "gray-box"
    eot_fresh_banks: bool = False
    seed: int = 0

    def __post_init__(self):
        self.norm = _norm_key(self.norm)
        if self.budget is None:
            self.budget = DEFAULT_BUDGET[self.norm]
        if self.step_size is None:
            self.step_size = bpda_step_size(self.budget, self.steps)
        if self.budget < 0 or self.steps < 0 or self.step_size <= 0:
            raise ValueError("need budget >= 0, steps >= 0 and step_size > 0")
        if self.eot_samples < 1:
            raise ValueError("eot_samples must be >= 1")
        if self.threat not in THREATS:
            raise ValueError(f"threat must be one of {THREATS}, got {self.threat!r}")

    def to_dict(self) -> dict:
        return {"norm": self.norm, "budget": self.budget, "steps": self.steps,
                "step_size": self.step_size, "eot_samples": self.eot_samples,
                "threat": self.threat, "eot_fresh_banks": self.eot_fresh_banks, "seed": self.seed}


def bpda_step_size(budget: float, steps: int) -> float:
    """Step size 2.5 * budget / steps used for long BPDA runs."""
    return 2.5 * budget / max(steps, 1)


def gpgd20() -> AttackConfig:
    return AttackConfig("inf", 8 / 255, 20, 2 / 255, threat="gray-box")


def bpda20_det() -> AttackConfig:
    return AttackConfig("inf", 8 / 255, 20, 2 / 255, threat="bpda-det")


def bpda200_det(norm="inf", eot_samples: int = 1) -> AttackConfig:
    return AttackConfig(norm, None, 200, None, eot_samples, "bpda-det")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: bool
    losses: list[float] = field(default_factory=list)
    pert_norm: float = 0.0
    zero_grad_steps: int = 0
    iterates: list[np.ndarray] = field(default_factory=list)


def project_simplex_l1(v: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto the l1 ball (sort-based simplex projection)."""
    if radius <= 0:
        return np.zeros_like(v)
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, len(u) + 1)
    keep = u * k > css - radius
    keep[0] = True  # holds exactly; rounding can lose it when radius is tiny
    rho = np.nonzero(keep)[0][-1]
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def project_perturbation(x0, x, norm, budget) -> np.ndarray:
    """Project x onto {||x - x0||_p <= budget} and then onto the box."""
    norm = _norm_key(norm)
    delta = x - x0
    if norm == "inf":
        delta = np.clip(delta, -budget, budget)
    elif norm == 2:
        n = np.linalg.norm(delta)
        if n > budget:
            delta = delta * (budget / n)
    else:
        delta = project_simplex_l1(delta, budget)
    return np.clip(x0 + delta, 0.0, 1.0)


def ascent_direction(g: np.ndarray, norm) -> np.ndarray:
    norm = _norm_key(norm)
    if norm == "inf":
        return np.sign(g)
    if norm == 2:
        return g / np.linalg.norm(g)
    j = int(np.argmax(np.abs(g)))
    out = np.zeros_like(g)
    out[j] = np.sign(g[j])
    return out


def _random_unit(rng, d, norm):
    v = rng.standard_normal(d)
    return v / pnorm(v, norm)


def pgd(x, y, loss_grad, cfg: AttackConfig, predict=None, keep_iterates=False) -> AttackResult:
    """Projected steepest ascent on loss_grad, starting from x itself."""
    x0 = np.asarray(x, dtype=np.float64).reshape(-1)
    if np.any(x0 < 0) or np.any(x0 > 1):
        raise ValueError("input must lie in [0, 1]^d")
    rng = np.random.default_rng(cfg.seed)
    xk = x0.copy()
    losses, iterates = [], [xk.copy()] if keep_iterates else []
    zero = 0
    for _ in range(cfg.steps):
        loss, g = loss_grad(xk, y)
        losses.append(float(loss))
        g = np.asarray(g, dtype=np.float64).reshape(-1)
        if not np.any(g):
            zero += 1
            direction = _random_unit(rng, xk.size, cfg.norm)
        else:
            direction = ascent_direction(g, cfg.norm)
        xk = project_perturbation(x0, xk + cfg.step_size * direction, cfg.norm, cfg.budget)
        if keep_iterates:
            iterates.append(xk.copy())
    if cfg.steps:
        losses.append(float(loss_grad(xk, y)[0]))
    success = bool(predict(xk) != y) if predict is not None else False
    return AttackResult(xk, success, losses, pnorm(xk - x0, cfg.norm), zero, iterates)


def fgsm(x, y, loss_grad, budget=8 / 255, predict=None) -> AttackResult:
    return pgd(x, y, loss_grad, AttackConfig("inf", budget, 1, budget), predict)


def through(purifier, loss_grad):
    """Straight-through gradient: evaluate at Pur(x), use the result at x."""
    def lg(x, y):
        return loss_grad(purifier(x), y)
    return lg


def bpda_det(x, y, purifier, loss_grad, cfg: AttackConfig, predict=None, keep_iterates=False) -> AttackResult:
    """BPDA with identity backward pass against a deterministic purifier."""
    pred = (lambda z: predict(purifier(z))) if predict is not None else None
    return pgd(x, y, through(purifier, loss_grad), cfg, pred, keep_iterates)


def eot_wrap(grad_fn, k: int):
    """Average k draws of ``grad_fn(x, y, draw) -> (loss, grad)`` per call.

    Draw indices advance by k on every call, so successive attack steps see
    fresh randomness. A running mean is used so that k identical gradients
    average to exactly that gradient.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    counter = [0]

    def lg(x, y):
        base = counter[0]
        counter[0] += k
        loss_mean, g_mean = None, None
        for i in range(k):
            loss, g = grad_fn(x, y, base + i)
            g = np.asarray(g, dtype=np.float64)
            if g_mean is None:
                loss_mean, g_mean = float(loss), g.copy()
            else:
                loss_mean += (loss - loss_mean) / (i + 1)
                g_mean = g_mean + (g - g_mean) / (i + 1)
        return loss_mean, g_mean

    return lg


def purifier_family(purifier, fresh_banks: bool):
    """``(x, draw) -> x_pur``; with fresh banks each draw re-seeds the purifier."""
    if not fresh_banks or not hasattr(purifier, "with_bank"):
        return lambda x, draw: purifier(x)
    return lambda x, draw: purifier.with_bank(purifier.cfg.bank.fresh(draw))(x)


def bpda_eot(x, y, purifier, loss_grad, cfg: AttackConfig, predict=None) -> AttackResult:
    family = purifier_family(purifier, cfg.eot_fresh_banks)
    lg = eot_wrap(lambda z, yy, draw: loss_grad(family(z, draw), yy), cfg.eot_samples)
    pred = (lambda z: predict(purifier(z))) if predict is not None else None
    return pgd(x, y, lg, cfg, pred)


@dataclass
class RobustnessReport:
    rows: list[dict]
    clean_accuracy: float
    adversarial_accuracy: float

    def to_csv(self, path) -> None:
        fields = ["sample_id", "label", "clean_pred", "adv_pred", "pert_norm", "success"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "pert_norm": repr(r["pert_norm"]), "success": int(r["success"])})


def evaluate_robustness(xs, ys, classifier, purifier, cfg: AttackConfig, threads: int = 1) -> RobustnessReport:
    """Clean and adversarial accuracy of ``classifier`` behind ``purifier``.

    gray-box: PGD on the bare classifier, then classify Pur(x_adv).
    bpda-det: BPDA(+EoT) through the purifier. ``purifier=None`` means none.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys = np.asarray(ys, dtype=np.int64)
    pur = purifier if purifier is not None else (lambda z: z)

    def one(i):
        x, y = xs[i], int(ys[i])
        clean_pred = int(classifier.predict(pur(x)))
        if cfg.threat == "gray-box" or purifier is None:
            res = pgd(x, y, classifier.loss_grad, cfg)
        elif cfg.eot_samples > 1:
            res = bpda_eot(x, y, purifier, classifier.loss_grad, cfg)
        else:
            res = bpda_det(x, y, purifier, classifier.loss_grad, cfg)
        adv_pred = int(classifier.predict(pur(res.x_adv)))
        return {"sample_id": i, "label": y, "clean_pred": clean_pred, "adv_pred": adv_pred,
                "pert_norm": res.pert_norm, "success": adv_pred != y}

    if threads <= 1:
        rows = [one(i) for i in range(len(xs))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, range(len(xs))))
    n = max(len(rows), 1)
    clean = sum(r["clean_pred"] == r["label"] for r in rows) / n
    adv = sum(r["adv_pred"] == r["label"] for r in rows) / n
    return RobustnessReport(rows, clean, adv)
