"""Central finite-difference check against the autodiff gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .numerics import ContractError, Tensor


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_fd|).

    ``f`` closes over ``params`` (leaf tensors) and returns a scalar. Leaf
    data is perturbed in place and restored. ``max_coords`` limits the check
    to a random subset of coordinates per parameter.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    for p in params:
        p.grad = None
        p.requires_grad = True
    base = f()
    if base.size != 1:
        raise ContractError(f"f must return a scalar, got shape {base.shape}")
    again = f()
    if float(base.data) != float(again.data):
        raise ContractError("f is not deterministic: two evaluations differ")
    base.backward()
    worst = 0.0
    for p in params:
        g_ad = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        g_flat = g_ad.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            g_fd = (hi - lo) / (2 * eps)
            err = abs(g_flat[i] - g_fd) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
