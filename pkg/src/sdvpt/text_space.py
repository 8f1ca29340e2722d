"""Frozen category text embeddings and top-K neighbour selection."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .numerics import DegenerateVectorError


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class TextEmbeddingTable:
    embeddings: np.ndarray
    category_names: tuple[str, ...]
    seen_mask: np.ndarray
    _seen_ids: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float64, copy=True)
        mask = np.array(self.seen_mask, dtype=bool, copy=True)
        names = tuple(self.category_names)
        if emb.ndim != 2:
            raise ValidationError(f"embeddings must be 2-D, got {emb.shape}")
        if len(names) != emb.shape[0] or mask.shape != (emb.shape[0],):
            raise ValidationError("names, mask and embeddings disagree on category count")
        if len(set(names)) != len(names):
            raise ValidationError("category names must be unique")
        if not np.all(np.isfinite(emb)) or np.any(np.linalg.norm(emb, axis=1) == 0):
            raise ValidationError("every embedding must be finite with positive norm")
        emb.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "seen_mask", mask)
        object.__setattr__(self, "category_names", names)
        seen = np.flatnonzero(mask)
        seen.setflags(write=False)
        object.__setattr__(self, "_seen_ids", seen)

    def __eq__(self, other):
        if not isinstance(other, TextEmbeddingTable):
            return NotImplemented
        return (
            self.category_names == other.category_names
            and np.array_equal(self.seen_mask, other.seen_mask)
            and self.embeddings.tobytes() == other.embeddings.tobytes()
        )

    @property
    def n_categories(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def seen_ids(self) -> np.ndarray:
        return self._seen_ids

    @property
    def n_seen(self) -> int:
        return int(self._seen_ids.size)

    def seen_slot(self, category_id: int) -> int:
        """Row of a seen category inside the prompt set."""
        slot = int(np.searchsorted(self._seen_ids, category_id))
        if slot >= self._seen_ids.size or self._seen_ids[slot] != category_id:
            raise KeyError(f"category {category_id} is not a seen category")
        return slot

    def embedding(self, category_id: int) -> np.ndarray:
        return self.embeddings[category_id]

    def similarities(self, query: np.ndarray) -> np.ndarray:
        """Cosine similarity of ``query`` to every category."""
        q = np.asarray(query, dtype=np.float64)
        qn = np.linalg.norm(q)
        if qn == 0:
            raise DegenerateVectorError("zero-norm query")
        sims = self.embeddings @ q / (np.linalg.norm(self.embeddings, axis=1) * qn)
        # rows identical to the query are exactly 1, not 1 - ulp
        same = np.all(self.embeddings == q, axis=1)
        sims[same] = 1.0
        return np.clip(sims, -1.0, 1.0)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.embeddings.tobytes())
        h.update(json.dumps([list(self.category_names), self.seen_mask.tolist()]).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class TopKSelection:
    indices: tuple[int, ...]
    weights: tuple[float, ...]

    def __len__(self):
        return len(self.indices)


def topk_similar(
    query,
    table: TextEmbeddingTable,
    k: int,
    exclude: int | None = None,
    nonnegative_weights: bool = False,
) -> TopKSelection:
    """The K seen categories most cosine-similar to ``query``.

    Ties go to the lower category id. ``exclude`` drops one category from
    the candidates (the self-exclusion mask used during refinement).
    """
    candidates = table.seen_ids
    if exclude is not None:
        candidates = candidates[candidates != exclude]
    if not 1 <= k <= candidates.size:
        raise ValueError(f"K={k} outside [1, {candidates.size}]")
    sims = table.similarities(query)[candidates]
    # lexsort: last key is primary
    order = np.lexsort((candidates, -sims))[:k]
    weights = sims[order]
    if nonnegative_weights:
        weights = np.maximum(weights, 0.0)
    return TopKSelection(tuple(int(i) for i in candidates[order]), tuple(float(w) for w in weights))


def save_table(table: TextEmbeddingTable, path: str | Path) -> None:
    path = Path(path)
    container.save(path, {"embeddings": table.embeddings})
    sidecar = {
        "category_names": list(table.category_names),
        "seen": [bool(s) for s in table.seen_mask],
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def load_table(path: str | Path) -> TextEmbeddingTable:
    path = Path(path)
    tensors = container.load(path)
    if "embeddings" not in tensors:
        raise container.FormatError("no 'embeddings' entry in table file")
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return TextEmbeddingTable(tensors["embeddings"], sidecar["category_names"], np.array(sidecar["seen"], dtype=bool))
