"""Counting head: patch/text similarity map decoded into a density map."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor


@dataclass(frozen=True)
class HeadConfig:
    reduced_channels: int = 4
    hidden: int = 8
    init_count: float = 8.0


@lru_cache(maxsize=8)
def bilinear_upsample_matrix(g: int) -> np.ndarray:
    """(2g*2g, g*g) operator for 2x bilinear upsampling, half-pixel centres, edge clamp."""
    out = 2 * g
    one_d = np.zeros((out, g))
    for i in range(out):
        src = min(max((i + 0.5) / 2 - 0.5, 0.0), g - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, g - 1)
        frac = src - lo
        one_d[i, lo] += 1.0 - frac
        one_d[i, hi] += frac
    m = np.kron(one_d, one_d)
    m.setflags(write=False)
    return m


def init_head_params(joint_dim: int, cfg: HeadConfig, seed: int, grid: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    c_in = 1 + cfg.reduced_channels
    # bias so the initial count is roughly init_count
    per_cell = cfg.init_count / (4.0 * grid * grid)
    bias = np.log(np.expm1(per_cell))
    return {
        "reduce_w": rng.normal(0.0, 1.0 / np.sqrt(joint_dim), size=(joint_dim, cfg.reduced_channels)),
        "reduce_b": np.zeros(cfg.reduced_channels),
        "conv1_w": rng.normal(0.0, 1.0 / np.sqrt(9 * c_in), size=(9 * c_in, cfg.hidden)),
        "conv1_b": np.zeros(cfg.hidden),
        "conv2_w": rng.normal(0.0, 0.1 / np.sqrt(9 * cfg.hidden), size=(9 * cfg.hidden, 1)),
        "conv2_b": np.full(1, bias),
    }


def similarity_map(patch_embeddings: Tensor, text_embeddings) -> Tensor:
    """Per-patch cosine similarity to the text embedding, (B, G, G).

    ``text_embeddings`` is (B, D_t) or (D_t,).
    """
    if patch_embeddings.ndim == 2:
        patch_embeddings = patch_embeddings.reshape(1, *patch_embeddings.shape)
    b, n, d = patch_embeddings.shape
    text = nx.as_tensor(text_embeddings)
    if text.ndim == 1:
        text = text.reshape(1, d)
    if text.shape[-1] != d:
        raise ContractError(f"text dim {text.shape[-1]} != patch dim {d}")
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ContractError(f"{n} patches do not form a square grid")
    sims = nx.cosine_rows(patch_embeddings, text.reshape(text.shape[0], 1, d))
    return sims.reshape(b, g, g)


def decode(sim: Tensor, patch_embeddings: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Density maps (B, 2G, 2G), non-negative."""
    if sim.ndim == 2:
        sim = sim.reshape(1, *sim.shape)
    b, g, _ = sim.shape
    reduced = patch_embeddings @ params["reduce_w"] + params["reduce_b"]
    feats = nx.concat([sim.reshape(b, g, g, 1), reduced.reshape(b, g, g, reduced.shape[-1])], axis=-1)
    h = nx.relu(nx.conv3x3(feats, params["conv1_w"], params["conv1_b"]))
    cells = nx.softplus(nx.conv3x3(h, params["conv2_w"], params["conv2_b"])).reshape(b, g * g)
    up = Tensor(bilinear_upsample_matrix(g).T)
    return (cells @ up).reshape(b, 2 * g, 2 * g)


def count(density) -> Tensor | float:
    """Sum of a density map; batched (B, H, W) tensors give (B,)."""
    if isinstance(density, Tensor):
        if density.ndim == 2:
            return density.sum()
        return density.reshape(density.shape[0], -1).sum(axis=1)
    return float(np.sum(density))
