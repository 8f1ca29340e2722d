"""Category prompt set: per-category selection, similarity-weighted fusion
and synthesis of prompts for categories never seen in training."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import Tensor, matmul, reshape
from .text_space import TextEmbeddingTable, TopKSelection, topk_similar

INIT_STD = 0.02


@dataclass
class BasePromptSet:
    """Learnable prompts, shape (n_seen, layers, tokens, width).

    Row ``r`` belongs to the r-th seen category of the text table (ascending
    category id); ``table.seen_slot`` does the lookup.
    """

    values: Tensor
    category_ids: tuple[int, ...]

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ValueError(f"prompt set must be 4-D, got {self.values.shape}")
        if len(self.category_ids) != self.values.shape[0]:
            raise ValueError("one prompt row per seen category required")
        self._slot = {c: i for i, c in enumerate(self.category_ids)}

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    @property
    def block_shape(self) -> tuple[int, int, int]:
        return self.values.shape[1:]

    def slot(self, category_id: int) -> int:
        try:
            return self._slot[int(category_id)]
        except KeyError:
            raise KeyError(f"no prompt for category {category_id} (not a seen category)") from None


@dataclass(frozen=True)
class FusedPrompt:
    values: Tensor
    provenance: TopKSelection | None = None


def init_prompt_set(n_c: int, l: int, t: int, d: int, seed: int, category_ids: Sequence[int] | None = None) -> BasePromptSet:
    if min(n_c, l, d) < 1 or t < 0:
        raise ValueError(f"prompt dims must be positive, got {(n_c, l, t, d)}")
    if t == 0:
        raise ValueError("token count must be >= 1 for a learnable prompt set")
    rng = np.random.default_rng(seed)
    values = rng.normal(0.0, INIT_STD, size=(n_c, l, t, d))
    ids = tuple(range(n_c)) if category_ids is None else tuple(int(c) for c in category_ids)
    return BasePromptSet(Tensor(values, requires_grad=True), ids)


def select(prompt_set: BasePromptSet, category_id: int) -> Tensor:
    """The (layers, tokens, width) block for one seen category, on the tape."""
    return prompt_set.values[prompt_set.slot(category_id)]


def fusion_matrix(prompt_set: BasePromptSet, selections: Sequence[TopKSelection], normalize: bool = False) -> np.ndarray:
    """(batch, n_seen) weight matrix; row b holds selection b's weights."""
    w = np.zeros((len(selections), prompt_set.shape[0]))
    for b, sel in enumerate(selections):
        if len(sel) == 0:
            raise ValueError("empty selection")
        for idx, weight in zip(sel.indices, sel.weights):
            w[b, prompt_set.slot(idx)] += weight
        if normalize:
            total = w[b].sum()
            if total == 0:
                raise ValueError("cannot normalize fusion weights that sum to zero")
            w[b] /= total
    return w


def fuse_batch(prompt_set: BasePromptSet, selections: Sequence[TopKSelection], normalize: bool = False) -> Tensor:
    """Fused prompts for a batch, shape (batch, layers, tokens, width)."""
    w = Tensor(fusion_matrix(prompt_set, selections, normalize))
    n, l, t, d = prompt_set.shape
    flat = reshape(prompt_set.values, (n, l * t * d))
    return reshape(matmul(w, flat), (len(selections), l, t, d))


def fuse(prompt_set: BasePromptSet, selection: TopKSelection, normalize: bool = False) -> FusedPrompt:
    values = fuse_batch(prompt_set, [selection], normalize)[0]
    return FusedPrompt(values, selection)


def select_batch(prompt_set: BasePromptSet, category_ids: Sequence[int]) -> Tensor:
    slots = np.array([prompt_set.slot(c) for c in category_ids])
    return prompt_set.values[slots]


def synthesize_unseen(
    prompt_set: BasePromptSet,
    table: TextEmbeddingTable,
    unseen_text_embedding,
    k: int,
    normalize: bool = False,
    nonnegative_weights: bool = False,
) -> FusedPrompt:
    sel = topk_similar(unseen_text_embedding, table, k, exclude=None, nonnegative_weights=nonnegative_weights)
    return fuse(prompt_set, sel, normalize)


def synthesis_op_count(k: int, l: int, t: int, d: int) -> int:
    """Multiply-adds needed to fuse K prompt blocks (K mults + K-1 adds per entry)."""
    return (2 * k - 1) * l * t * d
