"""Loss assembly: reconstruction, factorised ELBO regularisers, GSNN hybrid, total."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .experts import ExpertSet, jsd_dynamic_prior, moe_kl_upper, poe_combine
from .gaussian import DiagGaussian, kl_closed_form

DIVERGENCES = ("KL", "PoE", "MoE", "JS")
LOGIT_CLIP = 30.0


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value):
        super().__init__(f"loss component '{component}' is not finite ({value!r})")
        self.component = component


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.1
    alpha1: float = 0.5
    alpha2: float = 0.5
    lambda1: float = 0.001
    lambda2: float = 0.01
    lambda3: float = 0.5

    def __post_init__(self):
        for name in ("alpha1", "alpha2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("beta", "lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


# ------------------------------------------------------------------ reconstruction

def _logits(x) -> Tensor:
    if isinstance(x, Tensor):
        return ad.clip(x, -LOGIT_CLIP, LOGIT_CLIP)
    return Tensor(np.clip(np.asarray(x, dtype=np.float64), -LOGIT_CLIP, LOGIT_CLIP))


def _check_target(target, shape) -> np.ndarray:
    y = np.asarray(target, dtype=np.float64)
    if y.shape != tuple(shape):
        raise ValueError(f"prediction {tuple(shape)} and target {y.shape} differ")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("targets must be binary (0/1)")
    return y


def bce_with_logits(logits, target) -> Tensor:
    """Mean per-pixel binary cross-entropy."""
    x = _logits(logits)
    y = _check_target(target, x.shape)
    return ad.mean(ad.softplus(x) - x * y)


def soft_iou_loss(logits, target, smooth: float = 1.0) -> Tensor:
    """Mean over frames of 1 - (|p.y| + s) / (|p + y - p.y| + s); frames are (..., h, w)."""
    x = _logits(logits)
    y = _check_target(target, x.shape)
    p = ad.sigmoid(x)
    inter = ad.tsum(p * y, axis=(-2, -1))
    union = ad.tsum(p + y - p * y, axis=(-2, -1))
    return ad.mean(1.0 - (inter + smooth) / (union + smooth))


def rec_loss(path_logits, target, bce_weight: float = 1.0, iou_weight: float = 1.0) -> Tensor:
    """Sum over the fused-code decoding paths of BCE + soft-IoU."""
    total = None
    for x in path_logits:
        term = bce_with_logits(x, target) * bce_weight
        if iou_weight:
            term = term + soft_iou_loss(x, target) * iou_weight
        total = term if total is None else total + term
    if total is None:
        raise ValueError("rec_loss needs at least one path")
    return total


# ------------------------------------------------------------------ regularisers

def shared_regularizer(mode: str, q_c, p_c, rng: np.random.Generator | None = None,
                       n_samples: int = 8, pi=None, eps=None) -> Tensor:
    """Divergence between posterior and prior of the shared code, per mode.

    KL takes DiagGaussians; PoE, MoE and JS take ExpertSets of modality experts.
    """
    if mode == "KL":
        return kl_closed_form(_as_gauss(q_c), _as_gauss(p_c))
    if mode == "PoE":
        return kl_closed_form(poe_combine(_as_set(q_c)), poe_combine(_as_set(p_c)))
    if mode == "MoE":
        return moe_kl_upper(_as_set(q_c), _as_set(p_c))
    if mode == "JS":
        return jsd_dynamic_prior(_as_set(q_c), _as_set(p_c), pi=pi, n_samples=n_samples, rng=rng, eps=eps)
    raise ValueError(f"unknown divergence mode {mode!r}; expected one of {DIVERGENCES}")


def _as_set(d) -> ExpertSet:
    return d if isinstance(d, ExpertSet) else ExpertSet([d])


def _as_gauss(d) -> DiagGaussian:
    if isinstance(d, ExpertSet):
        if d.k != 1:
            raise ValueError("KL mode expects a single Gaussian for the shared code")
        return d.experts[0]
    return d


def elbo_hat(rec: Tensor, q: dict, p: dict, beta: float, mode: str = "JS",
             rng: np.random.Generator | None = None, n_samples: int = 8, pi=None,
             batch_size: int = 1, eps=None) -> tuple[Tensor, dict[str, Tensor]]:
    """Loss form of the factorised ELBO: rec + beta * (KL(s_a) + KL(s_v) + D(c)).

    ``q`` / ``p`` map code names ('c', 's_a', 's_v') to distributions; missing
    specific codes (unfactorised model) contribute zero. Divergences are sums
    over dims and timesteps divided by ``batch_size`` (per-clip mean).
    """
    if mode not in DIVERGENCES:
        raise ValueError(f"unknown divergence mode {mode!r}")
    terms: dict[str, Tensor] = {}
    for k in ("s_a", "s_v"):
        if k in q:
            terms[f"kl_{k}"] = kl_closed_form(q[k], p[k]) * (1.0 / batch_size)
        else:
            terms[f"kl_{k}"] = Tensor(0.0)
    terms["reg_c"] = shared_regularizer(mode, q["c"], p["c"], rng=rng, n_samples=n_samples,
                                        pi=pi, eps=eps) * (1.0 / batch_size)
    reg = terms["kl_s_a"] + terms["kl_s_v"] + terms["reg_c"]
    return rec + reg * beta, terms


def helbo(rec_posterior, rec_prior, regularizers, alpha1: float):
    """Loss form of the hybrid: alpha1 * (rec_po + reg) + (1 - alpha1) * rec_pr."""
    if not 0.0 <= alpha1 <= 1.0:
        raise ValueError("alpha1 must lie in [0, 1]")
    return (rec_posterior + regularizers) * alpha1 + rec_prior * (1.0 - alpha1)


# ------------------------------------------------------------------ total

@dataclass
class LossReport:
    total: float
    rec_posterior: float
    rec_prior: float
    kl_s_a: float
    kl_s_v: float
    reg_c: float
    diff: float
    sic: float
    avm: float

    def recombine(self, w: LossWeights) -> float:
        reg = w.beta * (self.kl_s_a + self.kl_s_v + self.reg_c)
        return (w.alpha1 * (self.rec_posterior + reg) + (1 - w.alpha1) * self.rec_prior
                + w.lambda1 * self.diff + w.lambda2 * self.sic + w.lambda3 * self.avm)

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


COMPONENTS = ("rec_posterior", "rec_prior", "kl_s_a", "kl_s_v", "reg_c", "diff", "sic", "avm")


def total_loss(components: dict[str, Tensor | float], w: LossWeights) -> tuple[Tensor, LossReport]:
    """-HELBO + l1 * diff + l2 * sic + l3 * avm, with a float report of every part.

    Missing components count as zero.
    """
    vals: dict[str, Tensor] = {}
    for name in COMPONENTS:
        v = components.get(name, 0.0)
        raw = v.item() if isinstance(v, Tensor) else float(v)
        if not math.isfinite(raw):
            raise NonFiniteLossError(name, raw)
        vals[name] = v if isinstance(v, Tensor) else Tensor(raw)
    reg = (vals["kl_s_a"] + vals["kl_s_v"] + vals["reg_c"]) * w.beta
    total = (helbo(vals["rec_posterior"], vals["rec_prior"], reg, w.alpha1)
             + vals["diff"] * w.lambda1 + vals["sic"] * w.lambda2 + vals["avm"] * w.lambda3)
    report = LossReport(total=total.item(), **{k: vals[k].item() for k in COMPONENTS})
    return total, report


def zero_avm(*_args, **_kwargs) -> Tensor:
    """Default audio-visual mapping hook: contributes nothing."""
    return Tensor(0.0)


AVMHook = Callable[..., Tensor]
