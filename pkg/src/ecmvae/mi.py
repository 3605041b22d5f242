"""Variational (Barber-Agakov) lower bound on I(sc_a; sc_v) and the hybrid SIC loss."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .gaussian import LOGVAR_MAX, LOGVAR_MIN, LOG_2PI
from .nn import Linear

GAUSSIAN_ENTROPY = 0.5 * math.log(2.0 * math.pi * math.e)


class VariationalConditional:
    """q(sc_a | sc_v) = N(mu(sc_v), diag sigma^2(sc_v)).

    Each statistic comes from its own FC -> tanh -> FC stack of width ``dim``.
    """

    def __init__(self, store: ParamStore, name: str, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.mu1 = Linear(store, f"{name}.mu1", dim, dim, rng)
        self.mu2 = Linear(store, f"{name}.mu2", dim, dim, rng)
        self.lv1 = Linear(store, f"{name}.lv1", dim, dim, rng)
        self.lv2 = Linear(store, f"{name}.lv2", dim, dim, rng)

    def __call__(self, sc_v: Tensor) -> tuple[Tensor, Tensor]:
        mu = self.mu2(ad.tanh(self.mu1(sc_v)))
        logvar = ad.clip(self.lv2(ad.tanh(self.lv1(sc_v))), LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar


def i_ba_surrogate(vc: VariationalConditional, sc_a: Tensor, sc_v: Tensor) -> Tensor:
    """Mean over timesteps (and clips) of log q(sc_a | sc_v), summed over code dims.

    This is the MI lower bound minus the marginal entropy H(sc_a), which is
    held constant.
    """
    sc_a, sc_v = ad.as_tensor(sc_a), ad.as_tensor(sc_v)
    if sc_a.shape != sc_v.shape or sc_a.shape[-1] != vc.dim:
        raise ValueError(f"i_ba_surrogate: shapes {sc_a.shape}, {sc_v.shape} vs dim {vc.dim}")
    mu, logvar = vc(sc_v)
    lp = -0.5 * (LOG_2PI + logvar + ad.square(sc_a - mu) * ad.exp(-logvar))
    return ad.mean(ad.tsum(lp, axis=-1))


def sic_loss(vc_po: VariationalConditional, posterior, prior, alpha2: float,
             vc_pr: VariationalConditional | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """-alpha2 * I_po - (1 - alpha2) * I_pr on the fused codes of two bundles.

    Returns (loss, I_po surrogate, I_pr surrogate). ``vc_pr`` defaults to the
    shared critic ``vc_po``. A zero weight skips that bundle entirely.
    """
    if not 0.0 <= alpha2 <= 1.0:
        raise ValueError("alpha2 must lie in [0, 1]")
    vc_pr = vc_po if vc_pr is None else vc_pr
    zero = ad.Tensor(0.0)
    i_po = i_ba_surrogate(vc_po, posterior.sc_a, posterior.sc_v) if alpha2 > 0 else zero
    i_pr = i_ba_surrogate(vc_pr, prior.sc_a, prior.sc_v) if alpha2 < 1 else zero
    loss = -(i_po * alpha2) - i_pr * (1.0 - alpha2)
    return loss, i_po, i_pr


def gaussian_mi_oracle(rho: float) -> float:
    """MI in nats per dimension of a unit-variance bivariate Gaussian with correlation rho."""
    if abs(rho) >= 1:
        raise ValueError("|rho| must be < 1")
    return -0.5 * math.log(1.0 - rho * rho)
