"""Finite-difference verification of reverse-mode gradients.

`grad_check` compares the analytic gradient of a scalar-valued function
against central differences, elementwise, and returns the worst relative
error.  Functions are re-run from scratch for every probe, so they must
be pure in their parameters.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


def grad_check(f, params: dict[str, Tensor], h: float = 1e-6) -> float:
    """Max over all parameter elements of |analytic - central| / max(1, |central|).

    Args:
        f: nullary callable building a fresh scalar Tensor from `params`.
        params: named leaf tensors with requires_grad=True.
        h: central-difference step.

    Raises:
        ContractError: if f does not return a scalar tensor or h <= 0.
    """
    if h <= 0:
        raise ContractError("grad_check: h must be positive")
    for name, p in params.items():
        if not p.requires_grad:
            raise ContractError(f"grad_check: parameter {name!r} has requires_grad=False")
        p.zero_grad()

    out = f()
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check: f must return a scalar tensor")
    out.backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = f().item()
            flat[i] = orig - h
            minus = f().item()
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * h)
            err = abs(analytic[name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return float(worst)


def numeric_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a raw array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = float(f(x))
        flat[i] = orig - h
        minus = float(f(x))
        flat[i] = orig
        gf[i] = (plus - minus) / (2.0 * h)
    return g
