"""Shared/specific latent codes, their fusion, and the orthogonality penalty."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .experts import ExpertSet, moe_sample
from .gaussian import DiagGaussian, reparam_sample

SIGMA_TILE = 0.1

Source = Union[DiagGaussian, ExpertSet]


@dataclass
class LatentBundle:
    c: Tensor
    s_a: Tensor
    s_v: Tensor
    sc_a: Tensor
    sc_v: Tensor
    dists: dict[str, Source] = field(default_factory=dict)


def _check_codes(*codes: Tensor) -> None:
    shape = codes[0].shape
    for x in codes[1:]:
        if x.shape != shape:
            raise ValueError(f"latent code shapes differ: {shape} vs {x.shape}")
    if len(shape) < 2:
        raise ValueError(f"latent codes must be (..., T, L), got {shape}")


def fuse(c: Tensor, s_a: Tensor, s_v: Tensor) -> tuple[Tensor, Tensor]:
    """Fused codes laid out as (specific, shared) along the latent axis."""
    c, s_a, s_v = ad.as_tensor(c), ad.as_tensor(s_a), ad.as_tensor(s_v)
    _check_codes(c, s_a, s_v)
    return ad.concat([s_a, c], axis=-1), ad.concat([s_v, c], axis=-1)


def _gram_sq(a: Tensor, b: Tensor) -> Tensor:
    # per-clip ||a^T b||_F^2 over the (T, L) matrix, shape (...,)
    g = ad.matmul(ad.transpose(a, _swap_last(a.ndim)), b)
    return ad.tsum(ad.square(g), axis=(-2, -1))


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    return tuple(axes)


def cross_gram_norms(c: Tensor, s_a: Tensor, s_v: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Per-clip squared Frobenius norms of c^T s_a, c^T s_v and s_a^T s_v."""
    c, s_a, s_v = ad.as_tensor(c), ad.as_tensor(s_a), ad.as_tensor(s_v)
    _check_codes(c, s_a, s_v)
    return _gram_sq(c, s_a), _gram_sq(c, s_v), _gram_sq(s_a, s_v)


def difference_loss(c: Tensor, s_a: Tensor, s_v: Tensor) -> Tensor:
    """||c^T s_a||_F^2 + ||c^T s_v||_F^2 + ||s_a^T s_v||_F^2, averaged over clips."""
    ca, cv, av = cross_gram_norms(c, s_a, s_v)
    return ad.mean(ca + cv + av)


def expand_to_map(code: Tensor, h: int, w: int, rng: np.random.Generator | None = None,
                  sigma: float = SIGMA_TILE, noise: np.ndarray | None = None) -> Tensor:
    """Tile a (N, D) code over an h x w grid and add N(0, sigma^2) noise -> (N, D, h, w)."""
    if h < 1 or w < 1:
        raise ValueError("map size must be positive")
    code = ad.as_tensor(code)
    n, d = code.shape[0], code.shape[1]
    tiled = ad.broadcast_to(ad.reshape(code, (n, d, 1, 1)), (n, d, h, w))
    if noise is None:
        if sigma == 0:
            return tiled
        noise = sigma * rng.standard_normal((n, d, h, w))
    return tiled + noise


def _draw(src: Source, rng: np.random.Generator) -> Tensor:
    if isinstance(src, ExpertSet):
        return moe_sample(src, rng)
    return reparam_sample(src, rng)


def build_bundle(c_dist: Source, s_a_dist: DiagGaussian, s_v_dist: DiagGaussian,
                 rng: np.random.Generator, zero_noise: bool = False) -> LatentBundle:
    """One reparameterised draw per code, fused.

    ``c_dist`` may be an ExpertSet (mixture) for the MoE-style modes.
    ``zero_noise`` returns the means (expert means weighted for mixtures).
    """
    if zero_noise:
        c = _mean(c_dist)
        s_a, s_v = s_a_dist.mu, s_v_dist.mu
    else:
        c = _draw(c_dist, rng)
        s_a = reparam_sample(s_a_dist, rng)
        s_v = reparam_sample(s_v_dist, rng)
    sc_a, sc_v = fuse(c, s_a, s_v)
    return LatentBundle(c, s_a, s_v, sc_a, sc_v, {"c": c_dist, "s_a": s_a_dist, "s_v": s_v_dist})


def _mean(src: Source) -> Tensor:
    if isinstance(src, ExpertSet):
        out = None
        for w, e in zip(src.weights, src.experts):
            out = e.mu * w if out is None else out + e.mu * w
        return out
    return src.mu


def write_latent_csv(path, rows: Iterable[tuple[str, int, str, np.ndarray]], latent_dim: int) -> int:
    """Rows of (clip_id, t, code_type, vector); returns the row count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["clip_id", "t", "code_type"] + [f"dim_{i}" for i in range(latent_dim)])
        for clip_id, t, code_type, vec in rows:
            wr.writerow([clip_id, t, code_type] + [repr(float(x)) for x in vec])
            n += 1
    return n
