"""Counting error metrics."""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np


class CountMetrics(NamedTuple):
    mae: float
    rmse: float
    nae: float
    sre: float


def metrics(preds: Sequence[float], gts: Sequence[float], normalized: bool = True) -> CountMetrics:
    """MAE, RMSE and the ground-truth-normalized NAE, SRE.

    NAE and SRE divide by each ground-truth count, so a zero count is a
    domain error unless ``normalized`` is False (they are then NaN).
    """
    p = np.asarray(preds, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 1:
        raise ValueError(f"preds {p.shape} and gts {g.shape} must be equal-length 1-D")
    if p.size == 0:
        raise ValueError("no samples")
    e = p - g
    mae = float(np.mean(np.abs(e)))
    rmse = math.sqrt(float(np.mean(e * e)))
    if not normalized:
        return CountMetrics(mae, rmse, math.nan, math.nan)
    zero = np.flatnonzero(g <= 0)
    if zero.size:
        raise ValueError(f"sample {int(zero[0])} has ground-truth count {g[zero[0]]}; NAE/SRE need positive counts")
    nae = float(np.mean(np.abs(e) / g))
    sre = math.sqrt(float(np.mean(e * e / g)))
    return CountMetrics(mae, rmse, nae, sre)
