"""Adam with optional row-sparse (lazy) updates for the prompt set."""
from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .numerics import NumericError, Tensor, is_checked


class Adam:
    """Bias-corrected Adam.

    Parameters named in ``row_sparse`` keep a step counter per leading-axis
    row and only rows passed to ``step(..., rows=...)`` are touched, so a
    prompt block that took no part in a batch stays bit-identical.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 row_sparse: Iterable[str] = (), lr_overrides: Mapping[str, float] | None = None):
        self.lr_overrides = dict(lr_overrides or {})
        for rate in [lr, *self.lr_overrides.values()]:
            if rate <= 0:
                raise ValueError(f"learning rate must be positive, got {rate}")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.row_sparse = set(row_sparse)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, np.ndarray] = {}

    def _ensure(self, name: str, p: np.ndarray) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(p)
            self.v[name] = np.zeros_like(p)
            self.t[name] = np.zeros(p.shape[0] if name in self.row_sparse else 1, dtype=np.float64)

    def step(self, params: Mapping[str, Tensor], rows: Mapping[str, Iterable[int]] | None = None) -> None:
        rows = rows or {}
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if is_checked() and not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
            self._ensure(name, p.data)
            m, v, t = self.m[name], self.v[name], self.t[name]
            lr = self.lr_overrides.get(name, self.lr)
            if name in self.row_sparse:
                idx = np.unique(np.asarray(list(rows.get(name, ())), dtype=np.int64))
                if idx.size == 0:
                    continue
                t[idx] += 1
                m[idx] = b1 * m[idx] + (1 - b1) * g[idx]
                v[idx] = b2 * v[idx] + (1 - b2) * g[idx] ** 2
                shape = (-1,) + (1,) * (p.data.ndim - 1)
                mhat = m[idx] / (1 - b1 ** t[idx]).reshape(shape)
                vhat = v[idx] / (1 - b2 ** t[idx]).reshape(shape)
                p.data[idx] -= lr * mhat / (np.sqrt(vhat) + self.eps)
            else:
                t += 1
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                mhat = m / (1 - b1 ** t[0])
                vhat = v / (1 - b2 ** t[0])
                p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self, prefix: str = "adam") -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.m):
            out[f"{prefix}/m/{name}"] = self.m[name]
            out[f"{prefix}/v/{name}"] = self.v[name]
            out[f"{prefix}/t/{name}"] = self.t[name]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str = "adam") -> None:
        for key, arr in arrays.items():
            if not key.startswith(prefix + "/"):
                continue
            kind, name = key[len(prefix) + 1:].split("/", 1)
            getattr(self, kind)[name] = np.array(arr, dtype=np.float64)


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Functional single-tensor Adam update; returns (param, m, v, t)."""
    t = t + 1
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    return param - lr * mhat / (np.sqrt(vhat) + eps), m, v, t
