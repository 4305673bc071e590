"""Closed-form ground truth for isotropic Gaussian mixtures.

Convolving a mixture component N(mu_k, std_k^2 I) with N(0, sigma^2 I) gives
N(mu_k, (std_k^2 + sigma^2) I), so the smoothed density, its score and the
score Jacobian are all available exactly. Everything in this module is used as
an oracle for the learned/estimated quantities elsewhere in the package.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GmmSpec:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    stds: np.ndarray  # (K,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu.reshape(len(w), -1)
        sd = np.asarray(self.stds, dtype=np.float64).reshape(-1)
        if not (len(w) == mu.shape[0] == len(sd)):
            raise ValueError("weights, means and stds must have the same number of components")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be positive and sum to 1, got {w}")
        if np.any(sd <= 0):
            raise ValueError("component stds must be positive")
        if not np.all(np.isfinite(mu)):
            raise ValueError("means must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", sd)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        return self.means[comp] + self.stds[comp, None] * rng.standard_normal((n, self.dim))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmSpec":
        return cls(d["weights"], d["means"], d["stds"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "GmmSpec":
        return cls.from_dict(json.loads(s))


# Two-mode reference mixture; 0.1 read as a standard deviation.
FIG1_SPEC = GmmSpec([0.5, 0.5], [[0.25], [0.75]], [0.1, 0.1])


def _as_points(spec: GmmSpec, y) -> tuple[np.ndarray, bool]:
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    y2 = y.reshape(1, -1) if single else y
    if y2.shape[-1] != spec.dim:
        raise ValueError(f"points have dimension {y2.shape[-1]}, mixture has {spec.dim}")
    if not np.all(np.isfinite(y2)):
        raise ValueError("points must be finite")
    return y2, single


def _check_sigma(sigma, strict=False):
    if not np.isfinite(sigma) or sigma < 0 or (strict and sigma == 0):
        raise ValueError(f"sigma must be {'> 0' if strict else '>= 0'}, got {sigma}")


def _component_terms(spec: GmmSpec, y2: np.ndarray, sigma: float):
    var = spec.stds**2 + sigma**2  # (K,)
    diff = y2[:, None, :] - spec.means[None, :, :]  # (n, K, d)
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    logc = np.log(spec.weights) - 0.5 * spec.dim * (LOG_2PI + np.log(var)) - 0.5 * sq / var
    return var, diff, logc


def smoothed_log_density(spec: GmmSpec, y, sigma: float):
    """log p_{Y_sigma}(y); ``sigma=0`` gives the data log-density itself."""
    _check_sigma(sigma)
    y2, single = _as_points(spec, y)
    _, _, logc = _component_terms(spec, y2, sigma)
    out = logsumexp(logc, axis=1)
    return float(out[0]) if single else out


def mixture_log_density(spec: GmmSpec, y, variances) -> np.ndarray:
    """Plain mixture log-density with explicit per-component variances."""
    y2, _ = _as_points(spec, y)
    var = np.asarray(variances, dtype=np.float64)
    diff = y2[:, None, :] - spec.means[None]
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    logc = np.log(spec.weights) - 0.5 * spec.dim * (LOG_2PI + np.log(var)) - 0.5 * sq / var
    return logsumexp(logc, axis=1)


def exact_score(spec: GmmSpec, y, sigma: float):
    _check_sigma(sigma)
    y2, single = _as_points(spec, y)
    var, diff, logc = _component_terms(spec, y2, sigma)
    resp = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
    s = -np.einsum("nk,nkd->nd", resp / var, diff)
    return s[0] if single else s


def score_jacobian(spec: GmmSpec, y, sigma: float):
    """Jacobian of the score (Hessian of the smoothed log-density), (n, d, d)."""
    _check_sigma(sigma)
    y2, single = _as_points(spec, y)
    var, diff, logc = _component_terms(spec, y2, sigma)
    resp = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
    a = -diff / var[None, :, None]  # per-component scores
    s = np.einsum("nk,nkd->nd", resp, a)
    eye = np.eye(spec.dim)
    jac = (
        -np.einsum("nk,k->n", resp, 1.0 / var)[:, None, None] * eye
        + np.einsum("nk,nki,nkj->nij", resp, a, a)
        - np.einsum("ni,nj->nij", s, s)
    )
    return jac[0] if single else jac


def tweedie_denoiser(spec: GmmSpec, y, sigma: float):
    """Posterior mean E[X | Y_sigma = y] = y + sigma^2 s(y; sigma)."""
    _check_sigma(sigma, strict=True)
    return np.asarray(y, dtype=np.float64) + sigma**2 * exact_score(spec, y, sigma)


class GmmScore:
    """Exact mixture score exposed through the score-model interface."""

    def __init__(self, spec: GmmSpec):
        self.spec = spec

    @property
    def dim(self) -> int:
        return self.spec.dim

    def score(self, y, sigma):
        return exact_score(self.spec, y, sigma)

    def score_vjp(self, y, sigma, v):
        jac = score_jacobian(self.spec, np.atleast_2d(y), sigma)
        # the Jacobian is a Hessian, hence symmetric
        return np.einsum("nij,nj->ni", jac, np.atleast_2d(v)).reshape(np.shape(v))


def ere_single_gaussian(mean, std: float, x, sigma: float) -> float:
    """Closed-form R(x; sigma) for a single isotropic Gaussian."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), x.shape)
    v = std**2 + sigma**2
    d = x.size
    return float(d * (std**2 / v) ** 2 + sigma**2 * np.sum((x - mean) ** 2) / v**2)


def ere_samples(score_fn, x, sigma: float, xi: np.ndarray) -> np.ndarray:
    """Per-sample reconstruction errors ||xi + sigma s(x + sigma xi)||^2."""
    r = xi + sigma * score_fn(x[None, :] + sigma * xi, sigma)
    return np.einsum("nd,nd->n", r, r)


def exact_ere(
    spec: GmmSpec,
    x,
    sigma: float,
    n_mc: int = 10**5,
    seed: int = 0,
    antithetic: bool = False,
    return_se: bool = False,
    chunk: int = 2**17,
):
    """Monte Carlo R(x; sigma) using the exact mixture score."""
    _check_sigma(sigma, strict=True)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    rng = np.random.Generator(np.random.Philox(seed))
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_mc:
        n = min(chunk, n_mc - done)
        if antithetic:
            half = rng.standard_normal(((n + 1) // 2, spec.dim))
            xi = np.concatenate([half, -half])[:n]
        else:
            xi = rng.standard_normal((n, spec.dim))
        vals = ere_samples(lambda y, s: exact_score(spec, y, s), x, sigma, xi)
        total += vals.sum()
        total_sq += np.dot(vals, vals)
        done += n
    mean = total / n_mc
    if not return_se:
        return mean
    var = max(total_sq / n_mc - mean**2, 0.0) * n_mc / max(n_mc - 1, 1)
    return mean, float(np.sqrt(var / n_mc))


def ere_quadrature(score_fn, x, sigma: float, n_nodes: int = 128) -> float:
    """Gauss-Hermite R(x; sigma) for d = 1 (cross-check only)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != 1:
        raise ValueError("quadrature cross-check is one-dimensional")
    t, w = np.polynomial.hermite.hermgauss(n_nodes)
    xi = (np.sqrt(2.0) * t)[:, None]
    vals = ere_samples(score_fn, x, sigma, xi)
    return float(np.dot(w, vals) / np.sqrt(np.pi))


def _grid(box, resolution: int):
    axes = [np.linspace(lo, hi, resolution) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return axes, np.stack([m.reshape(-1) for m in mesh], axis=1)


def grid_argmax(spec: GmmSpec, sigma: float, box, resolution: int) -> np.ndarray:
    """Brute-force maximizer of the smoothed log-density over a regular grid."""
    if spec.dim > 2:
        raise ValueError("grid search only supported for d <= 2")
    box = np.asarray(box, dtype=np.float64).reshape(spec.dim, 2)
    _, pts = _grid(box, resolution)
    vals = smoothed_log_density(spec, pts, sigma)
    return pts[int(np.argmax(vals))]


def local_extrema_1d(values: np.ndarray, kind: str = "min") -> np.ndarray:
    """Indices of strict interior local minima (or maxima) of a sampled curve.

    Plateaus count once, at their first index.
    """
    v = np.asarray(values, dtype=np.float64)
    if kind == "max":
        v = -v
    idx = []
    i = 1
    while i < len(v) - 1:
        j = i
        while j + 1 < len(v) - 1 and v[j + 1] == v[i]:
            j += 1
        if v[i] < v[i - 1] and v[i] < v[j + 1]:
            idx.append(i)
        i = j + 1
    return np.asarray(idx, dtype=int)


def grid_local_maxima(spec: GmmSpec, sigma: float, lo: float, hi: float, resolution: int):
    """All interior grid-local maximizers of the smoothed log-density in 1d."""
    if spec.dim != 1:
        raise ValueError("local maxima enumeration is one-dimensional")
    xs = np.linspace(lo, hi, resolution)
    vals = smoothed_log_density(spec, xs[:, None], sigma)
    return xs[local_extrema_1d(vals, "max")]
