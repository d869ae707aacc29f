"""Small learnable building blocks shared by the matching and alignment code."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear:
    """Affine map y = x W + b with named parameters."""

    def __init__(self, rng, d_in, d_out, name, init="glorot"):
        if init == "identity":
            w = np.eye(d_in, d_out)
        else:
            w = glorot(rng, d_in, d_out)
        self.w = ad.param(w)
        self.b = ad.param(np.zeros(d_out))
        self.name = name

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}


class Mlp:
    """Stack of Linear layers with tanh between (none after the last)."""

    def __init__(self, rng, dims, name):
        self.layers = [
            Linear(rng, dims[i], dims[i + 1], f"{name}.fc{i}")
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x):
        out = x
        for i, layer in enumerate(self.layers):
            out = layer(out)
            if i + 1 < len(self.layers):
                out = ad.tanh(out)
        return out

    def params(self):
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out


def collect_params(*blocks):
    """Merge parameter dicts; duplicate names are a programming error."""
    merged = {}
    for block in blocks:
        for name, tensor in block.params().items():
            if name in merged:
                raise ValueError(f"duplicate parameter name: {name}")
            merged[name] = tensor
    return merged
