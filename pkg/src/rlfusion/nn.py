"""Small parameter containers built on the autodiff engine.

Parameters are plain Tensors collected into dicts keyed by dotted names
so the optimizer and the checkpoint writer can walk them uniformly.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Linear:
    """y = x @ W + b for 2-d inputs (rows are samples)."""

    def __init__(self, rng, in_dim: int, out_dim: int, dtype=np.float64):
        self.w = ad.he_init(rng, (in_dim, out_dim), fan_in=in_dim, dtype=dtype)
        self.b = ad.zeros((out_dim,), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add_row_bias(ad.matmul(x, self.w), self.b)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Mlp:
    """Linear -> ReLU -> Linear, applied to the last axis of any-rank input."""

    def __init__(self, rng, in_dim: int, hidden: int, out_dim: int, dtype=np.float64):
        self.fc1 = Linear(rng, in_dim, hidden, dtype)
        self.fc2 = Linear(rng, hidden, out_dim, dtype)
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = ad.reshape(x, (int(np.prod(lead)) if lead else 1, x.shape[-1]))
        h = ad.relu(self.fc1(flat))
        y = self.fc2(h)
        return ad.reshape(y, lead + (self.out_dim,))

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.fc1.params(f"{prefix}.fc1")
        out.update(self.fc2.params(f"{prefix}.fc2"))
        return out


class Conv:
    """3x3 or 1x1 conv with bias over CHW maps."""

    def __init__(self, rng, in_ch: int, out_ch: int, k: int = 3, stride: int = 1,
                 pad: int = 1, dtype=np.float64):
        self.w = ad.he_init(rng, (out_ch, in_ch, k, k), fan_in=in_ch * k * k, dtype=dtype)
        self.b = ad.zeros((out_ch,), dtype=dtype)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def collect_params(named_modules: dict) -> dict[str, Tensor]:
    """Flatten {name: module-or-tensor} into a single parameter dict."""
    out: dict[str, Tensor] = {}
    for name, mod in named_modules.items():
        if isinstance(mod, Tensor):
            out[name] = mod
        else:
            out.update(mod.params(name))
    return out
