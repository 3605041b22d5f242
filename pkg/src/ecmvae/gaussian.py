"""Diagonal Gaussian latents: sampling, closed-form KL, log-density, MC oracles."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DiagGaussian:
    """Per-timestep diagonal Gaussian; ``mu`` and ``logvar`` share a shape (..., T, L).

    Use :func:`gaussian` to build one from raw network outputs: it clamps
    ``logvar`` to [-10, 10].
    """

    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ValueError(f"mu {self.mu.shape} and logvar {self.logvar.shape} differ")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.logvar.data)


def gaussian(mu, logvar) -> DiagGaussian:
    return DiagGaussian(ad.as_tensor(mu), ad.clip(ad.as_tensor(logvar), LOGVAR_MIN, LOGVAR_MAX))


def _check_same(a_shape, b_shape, what: str) -> None:
    if tuple(a_shape) != tuple(b_shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a_shape)} vs {tuple(b_shape)}")


def reparam_sample(d: DiagGaussian, rng: np.random.Generator | None = None,
                   eps: np.ndarray | None = None) -> Tensor:
    """mu + exp(logvar / 2) * eps, eps ~ N(0, I) unless given explicitly."""
    if eps is None:
        eps = rng.standard_normal(d.shape)
    return d.mu + ad.exp(0.5 * d.logvar) * eps


def kl_elementwise(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    _check_same(q.shape, p.shape, "kl")
    diff = q.mu - p.mu
    return (0.5 * (p.logvar - q.logvar)
            + (ad.exp(q.logvar) + ad.square(diff)) * (0.5 * ad.exp(-p.logvar)) - 0.5)


def kl_closed_form(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) summed over every dimension and timestep."""
    return ad.tsum(kl_elementwise(q, p))


def log_prob_elementwise(d: DiagGaussian, x) -> Tensor:
    x = ad.as_tensor(x)
    _check_same(d.shape, x.shape, "log_prob")
    return -0.5 * (LOG_2PI + d.logvar + ad.square(x - d.mu) * ad.exp(-d.logvar))


def log_prob(d: DiagGaussian, x) -> Tensor:
    """Sum of per-dimension Gaussian log densities."""
    return ad.tsum(log_prob_elementwise(d, x))


def np_log_prob(mu: np.ndarray, logvar: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Plain-numpy per-element log density (broadcasting over leading sample axes)."""
    return -0.5 * (LOG_2PI + logvar + (x - mu) ** 2 * np.exp(-logvar))


def mc_kl(q: DiagGaussian, p: DiagGaussian, n_samples: int, rng: np.random.Generator,
          chunk: int = 100_000) -> tuple[float, float]:
    """Monte-Carlo KL(q || p) with its standard error, z ~ q."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    _check_same(q.shape, p.shape, "mc_kl")
    qm, ql, pm, pl = q.mu.data, q.logvar.data, p.mu.data, p.logvar.data
    axes = tuple(range(1, qm.ndim + 1))
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        z = qm + np.exp(0.5 * ql) * rng.standard_normal((n,) + qm.shape)
        w = (np_log_prob(qm, ql, z) - np_log_prob(pm, pl, z)).sum(axis=axes)
        total += w.sum()
        total_sq += (w * w).sum()
        done += n
    est = total / n_samples
    var = max(total_sq / n_samples - est * est, 0.0)
    se = math.sqrt(var / n_samples)
    return est, se
