"""Small feedforward building blocks on the tensor engine.

Parameters are named Tensors with requires_grad=True; every container exposes
``params(prefix)`` returning a flat dict of name -> Tensor so optimizers and
checkpoints can address weights uniformly.
"""

from __future__ import annotations

import numpy as np

from . import engine as en
from .engine import Tensor


class Linear:
    """Affine layer y = x @ w + b with 1/sqrt(fan_in) normal init (or zeros)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero_init: bool = False):
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return en.add(en.matmul(x, self.w), self.b)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class MLP:
    """Feedforward net with tanh hidden activations and a linear output layer.

    zero_final zero-initializes the output layer, used by spline conditioners
    so a fresh flow is exactly the identity transform.
    """

    def __init__(self, n_in: int, hidden: tuple, n_out: int, rng: np.random.Generator,
                 zero_final: bool = False):
        dims = [n_in] + list(hidden) + [n_out]
        self.layers = []
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            self.layers.append(Linear(dims[i], dims[i + 1], rng, zero_init=zero_final and last))

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = en.tanh(h)
        return h

    def params(self, prefix: str) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}.layer{i}"))
        return out


class Conv2dLayer:
    """Strided 3x3 convolution with padding 1."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 2):
        fan_in = c_in * 9
        self.w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(c_out, c_in, 3, 3)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return en.conv2d(x, self.w, self.b, stride=self.stride, padding=1)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}
