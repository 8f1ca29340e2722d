"""Loss terms for prompt training and their stage-wise combinations."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.0
    lambda3: float = 10.0
    tau: float = 0.07

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


def contrastive_loss(image_embs, text_embs, category_ids: Sequence[int], tau: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over a batch with same-category pairs masked.

    Row i pairs image i with the text of its category. For sample i the
    image->text term normalizes over the texts of rows whose category
    differs from i's, plus the positive; the text->image term does the same
    over images. The loss is the batch mean of the two terms' sum.
    """
    img, txt = nx.as_tensor(image_embs), nx.as_tensor(text_embs)
    ids = np.asarray(category_ids)
    n = img.shape[0]
    if img.ndim != 2 or txt.shape != img.shape or ids.shape != (n,):
        raise ContractError(f"misaligned inputs: images {img.shape}, texts {txt.shape}, ids {ids.shape}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if n < 1:
        raise ContractError("empty batch")
    sims = nx.l2_normalize(img) @ nx.transpose(nx.l2_normalize(txt))  # [i, j] = s(img_i, txt_j)
    logits = sims * (1.0 / tau)
    same = ids[:, None] == ids[None, :]
    keep = ~same | np.eye(n, dtype=bool)
    # masked entries pushed to -inf-ish; exact zeros after exp
    penalty = Tensor(np.where(keep, 0.0, -1e300))
    diag = Tensor(np.eye(n))
    pos = (logits * diag).sum(axis=1)
    i2t = nx.logsumexp(logits + penalty, axis=1) - pos
    t2i = nx.logsumexp(nx.transpose(logits) + penalty, axis=1) - pos
    return (i2t + t2i).mean()


def contrastive_loss_all(image_embs, category_ids: Sequence[int], table, tau: float = 0.07) -> Tensor:
    """Variant whose image->text term normalizes over every seen category's text.

    The text->image term is the same masked in-batch term as in
    ``contrastive_loss``.
    """
    img = nx.as_tensor(image_embs)
    ids = np.asarray(category_ids)
    seen = table.seen_ids
    all_txt = Tensor(table.embeddings[seen])
    cols = np.array([table.seen_slot(int(c)) for c in ids])
    logits_all = (nx.l2_normalize(img) @ nx.transpose(nx.l2_normalize(all_txt))) * (1.0 / tau)
    onehot = Tensor(np.eye(len(seen))[cols])
    pos = (logits_all * onehot).sum(axis=1)
    i2t = nx.logsumexp(logits_all, axis=1) - pos
    txt = Tensor(table.embeddings[ids])
    logits = (nx.l2_normalize(img) @ nx.transpose(nx.l2_normalize(txt))) * (1.0 / tau)
    same = ids[:, None] == ids[None, :]
    keep = ~same | np.eye(len(ids), dtype=bool)
    t2i = nx.logsumexp(nx.transpose(logits) + Tensor(np.where(keep, 0.0, -1e300)), axis=1) - pos
    return (i2t + t2i).mean()


def mse_count_loss(pred_counts, gt_counts) -> Tensor:
    pred = nx.as_tensor(pred_counts)
    gt = np.asarray(gt_counts, dtype=np.float64)
    if pred.size == 0 or gt.size == 0:
        raise ValueError("empty count lists")
    if pred.shape != gt.shape:
        raise ContractError(f"pred {pred.shape} and gt {gt.shape} differ")
    return nx.square(pred - Tensor(gt)).mean()


def recon_loss(fused, target, metric: str = "l2") -> Tensor:
    """Distance between a fused prompt and the category's own prompt.

    Leading batch axis is allowed; the result is then the batch mean.
    """
    fused, target = nx.as_tensor(fused), nx.as_tensor(target)
    if fused.shape != target.shape:
        raise ContractError(f"shapes {fused.shape} and {target.shape} differ")
    if metric == "l2":
        diff = target - fused
        if diff.ndim <= 3:
            return nx.square(diff).sum()
        return nx.square(diff).reshape(diff.shape[0], -1).sum(axis=1).mean()
    if metric == "cosine":
        if target.ndim <= 3:
            return 1.0 - nx.cosine_rows(target.reshape(-1), fused.reshape(-1))
        b = target.shape[0]
        return (1.0 - nx.cosine_rows(target.reshape(b, -1), fused.reshape(b, -1))).mean()
    raise ValueError(f"unknown recon metric {metric!r}")


def loss_cspi(l_mse, l_con, w: LossWeights, l_model=0.0):
    return l_mse + w.lambda1 * l_con + w.lambda2 * l_model


def loss_tgpr(l_mse, l_con, l_recon, w: LossWeights, l_model=0.0):
    return loss_cspi(l_mse, l_con, w, l_model) + w.lambda3 * l_recon
