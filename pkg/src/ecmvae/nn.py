"""Tiny layer helpers that register their weights in a ParamStore."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor


class Linear:
    """y = x W + b over the last axis."""

    def __init__(self, store: ParamStore, name: str, din: int, dout: int, rng: np.random.Generator,
                 gain: float = 1.0):
        bound = gain * math.sqrt(6.0 / (din + dout))
        self.w = store.add(f"{name}.w", rng.uniform(-bound, bound, (din, dout)))
        self.b = store.add(f"{name}.b", np.zeros(dout))
        self.din, self.dout = din, dout

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.din:
            raise ValueError(f"Linear expects last dim {self.din}, got {x.shape}")
        lead = x.shape[:-1]
        y = ad.matmul(ad.reshape(x, (-1, self.din)), self.w) + self.b
        return ad.reshape(y, lead + (self.dout,))


class Conv2d:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True,
                 fan_in: int | None = None):
        # fan_in override lets a conv split over input groups keep the joint He scale
        fan_in = cin * k * k if fan_in is None else fan_in
        std = math.sqrt(2.0 / fan_in)
        self.w = store.add(f"{name}.w", rng.standard_normal((cout, cin, k, k)) * std)
        self.b = store.add(f"{name}.b", np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)
