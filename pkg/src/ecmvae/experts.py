"""Joint distributions over modality experts: PoE, MoE, and the JS regularizer.

``mixture_log_prob`` and ``moe_sample`` treat each expert as one joint
distribution over its whole (T, L) event; leading axes beyond the last two are
batch axes. The JS regulariser instead mixes coordinate-wise (each scalar
latent gets its own 2K-component mixture), so it sums over dimensions and
timesteps exactly like the closed-form KL.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gaussian import DiagGaussian, gaussian, kl_closed_form, log_prob_elementwise, reparam_sample, LOG_2PI

EVENT_DIMS = 2


def _check_weights(weights: Sequence[float], k: int) -> tuple[float, ...]:
    w = tuple(float(x) for x in weights)
    if len(w) != k:
        raise ValueError(f"expected {k} weights, got {len(w)}")
    if abs(sum(w) - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {sum(w)!r}")
    if any(x < 0 for x in w):
        raise ValueError("weights must be non-negative")
    return w


@dataclass(frozen=True)
class ExpertSet:
    """K same-shaped Gaussian experts with mixture weights (uniform if omitted).

    A zero weight is accepted so degenerate mixtures can be expressed.
    """

    experts: tuple[DiagGaussian, ...]
    weights: tuple[float, ...]

    def __init__(self, experts: Sequence[DiagGaussian], weights: Sequence[float] | None = None):
        experts = tuple(experts)
        if not experts:
            raise ValueError("ExpertSet needs at least one expert")
        shape = experts[0].shape
        for e in experts:
            if e.shape != shape:
                raise ValueError(f"expert shapes differ: {shape} vs {e.shape}")
        if weights is None:
            weights = [1.0 / len(experts)] * len(experts)
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "weights", _check_weights(weights, len(experts)))

    @property
    def k(self) -> int:
        return len(self.experts)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.experts[0].shape


# MixturePrior carries the same data and invariants.
MixturePrior = ExpertSet


def poe_combine(s: ExpertSet) -> DiagGaussian:
    """Precision-weighted product of the experts (itself Gaussian)."""
    if s.k == 1:
        return s.experts[0]
    precs = [ad.exp(-e.logvar) for e in s.experts]
    prec = precs[0]
    num = precs[0] * s.experts[0].mu
    for pk, e in zip(precs[1:], s.experts[1:]):
        prec = prec + pk
        num = num + pk * e.mu
    return gaussian(num / prec, -ad.log(prec))


def _stack(tensors: Sequence[Tensor]) -> Tensor:
    return ad.concat([ad.reshape(t, (1,) + t.shape) for t in tensors], axis=0)


def moe_sample(s: ExpertSet, rng: np.random.Generator, stratified: bool = False,
               eps: Sequence[np.ndarray] | None = None):
    """Sample the mixture: pick an expert per batch item, then reparameterise.

    With ``stratified=True`` returns ``[(weight, sample), ...]`` with one draw
    per expert, for weight-averaged losses.
    """
    if eps is None:
        eps = [rng.standard_normal(s.shape) for _ in range(s.k)]
    draws = [reparam_sample(e, eps=ek) for e, ek in zip(s.experts, eps)]
    if stratified:
        return list(zip(s.weights, draws))
    if s.k == 1:
        return draws[0]
    batch_shape = s.shape[:-EVENT_DIMS]
    idx = rng.choice(s.k, size=batch_shape, p=np.asarray(s.weights))
    out = None
    for k, d in enumerate(draws):
        sel = (np.asarray(idx) == k).astype(np.float64).reshape(batch_shape + (1,) * EVENT_DIMS)
        if not sel.any():
            continue
        term = d * sel
        out = term if out is None else out + term
    return out


def mixture_log_prob(m: ExpertSet, x, elementwise: bool = False) -> Tensor:
    """log sum_k w_k exp(log p_k(x)), max-shifted.

    Default: each component is a joint density over the (T, L) event and the
    result is summed over batch items. ``elementwise=True`` mixes each
    coordinate separately and returns per-element values.
    """
    x = ad.as_tensor(x)
    if x.shape != m.shape:
        raise ValueError(f"mixture_log_prob: shape mismatch {x.shape} vs {m.shape}")
    terms = []
    keep = [(w, e) for w, e in zip(m.weights, m.experts) if w > 0]
    for w, e in keep:
        lp = log_prob_elementwise(e, x)
        if not elementwise:
            lp = ad.tsum(lp, axis=tuple(range(lp.ndim - EVENT_DIMS, lp.ndim)))
        terms.append(lp + math.log(w))
    out = ad.logsumexp(_stack(terms), axis=0)
    return out if elementwise else ad.tsum(out)


def moe_kl_upper(q_experts: ExpertSet, p_experts: ExpertSet) -> Tensor:
    """sum_k w_k KL(q_k || p_k): an upper bound on KL between the two mixtures."""
    if q_experts.k != p_experts.k:
        raise ValueError(f"expert count mismatch: {q_experts.k} vs {p_experts.k}")
    total = None
    for w, q, p in zip(q_experts.weights, q_experts.experts, p_experts.experts):
        term = kl_closed_form(q, p) * w
        total = term if total is None else total + term
    return total


def jsd_dynamic_prior(q_experts: ExpertSet, p_experts: ExpertSet, pi: Sequence[float] | None = None,
                      n_samples: int = 8, rng: np.random.Generator | None = None,
                      eps: np.ndarray | None = None, return_se: bool = False):
    """MC estimate of sum_j pi_j KL(component_j || f), f = uniform mixture of all 2K components.

    Components are the posterior experts followed by the prior experts. Each
    coordinate is mixed independently and the per-coordinate divergences are
    summed. Samples are reparameterised, so gradients reach both families.
    ``eps`` (shape (2K, n, *event)) freezes the noise.
    """
    comps = list(q_experts.experts) + list(p_experts.experts)
    n_comp = len(comps)
    if pi is None:
        pi = [1.0 / n_comp] * n_comp
    pi = _check_weights(pi, n_comp)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    shape = comps[0].shape
    for c in comps:
        if c.shape != shape:
            raise ValueError(f"component shapes differ: {shape} vs {c.shape}")
    if eps is None:
        eps = rng.standard_normal((n_comp, n_samples) + shape)
    mu = _stack([c.mu for c in comps])            # (C, *shape)
    lv = _stack([c.logvar for c in comps])
    sd = ad.exp(0.5 * lv)
    nd = len(shape)
    # z[j, i] ~ component j
    mu_j = ad.reshape(mu, (n_comp, 1) + shape)
    z = mu_j + ad.reshape(sd, (n_comp, 1) + shape) * eps            # (C, n, *shape)
    # log density of every z under every component i: (C_j, n, C_i, *shape)
    z_e = ad.reshape(z, (n_comp, n_samples, 1) + shape)
    mu_i = ad.reshape(mu, (1, 1, n_comp) + shape)
    lv_i = ad.reshape(lv, (1, 1, n_comp) + shape)
    inv_var_i = ad.exp(-lv_i)
    logp = -0.5 * (LOG_2PI + lv_i + ad.square(z_e - mu_i) * inv_var_i)
    log_f = ad.logsumexp(logp, axis=2) - math.log(n_comp)            # (C, n, *shape)
    # own-component density: diagonal j == i, computed directly (fewer ops)
    own = -0.5 * (LOG_2PI + ad.reshape(lv, (n_comp, 1) + shape) + ad.square(eps))
    per = own - log_f                                                # (C, n, *shape)
    per = ad.tsum(per, axis=tuple(range(2, 2 + nd)))                 # (C, n)
    w = np.asarray(pi).reshape(n_comp, 1)
    per_sample = ad.tsum(per * w, axis=0)                            # (n,)
    est = ad.mean(per_sample)
    if return_se:
        vals = per_sample.data
        se = float(vals.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else float("inf")
        return est, se
    return est
