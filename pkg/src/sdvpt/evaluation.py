"""Evaluation pipelines: per-split reports, top-K sweeps, embedding dumps
and the prompt-synthesis overhead benchmark."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, load_checkpoint
from .data import SplitArrays
from .metrics import metrics
from .numerics import ContractError, Tensor
from .prompts import fuse_batch, synthesis_op_count
from .text_space import topk_similar
from .training import TrainState, predict_counts, state_from_checkpoint

MODES = ("sdvpt", "shared_vpt", "cspi_only", "no_prompt")


@dataclass
class EvalReport:
    split: str
    mode: str
    k: int | None
    gts: list[float]
    preds: list[float]
    mae: float
    rmse: float
    nae: float
    sre: float
    mean_alignment: float
    checkpoint_hash: str
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def recompute(self):
        return metrics(self.preds, self.gts)


def _require_mode(state: TrainState, mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "sdvpt" and not (state.variant == "sdvpt" and state.stage == "tgpr"):
        raise ContractError(f"mode sdvpt needs a refined (tgpr) checkpoint, got {state.variant}/{state.stage}")
    if mode == "cspi_only" and not (state.variant == "sdvpt" and state.stage == "cspi"):
        raise ContractError(f"mode cspi_only needs a CSPI-stage checkpoint, got {state.variant}/{state.stage}")
    if mode == "shared_vpt" and state.variant != "shared_vpt":
        raise ContractError("mode shared_vpt needs the shared-prompt baseline checkpoint")


def synthesized_prompts(state: TrainState, category_ids: Sequence[int], k: int) -> Tensor:
    """One prompt per sample from its category's top-K seen neighbours (no self-exclusion)."""
    cfg = state.config
    cache = {}
    sels = []
    for c in category_ids:
        c = int(c)
        if c not in cache:
            cache[c] = topk_similar(state.table.embedding(c), state.table, k, exclude=None,
                                    nonnegative_weights=cfg.nonnegative_weights)
        sels.append(cache[c])
    return fuse_batch(state.prompts, sels, cfg.normalize_fusion_weights)


def prompts_for(state: TrainState, category_ids: Sequence[int], mode: str, k: int) -> Tensor | None:
    if mode in ("sdvpt", "cspi_only"):
        return synthesized_prompts(state, category_ids, k)
    if mode == "shared_vpt":
        return state.prompts.values
    return None


def _load_state(ckpt) -> tuple[TrainState, str]:
    if isinstance(ckpt, TrainState):
        return ckpt, ""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    return state_from_checkpoint(ckpt), ckpt.hash


def run_inference(state: TrainState, split: SplitArrays, mode: str, k: int, batch_size: int = 32,
                  collect_embeddings: bool = False):
    preds, align, embs = [], [], []
    with nx.checked(False):
        for lo in range(0, len(split), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(split)))
            cats = split.category_ids[idx]
            text = state.table.embeddings[cats]
            prompts = prompts_for(state, cats, mode, k)
            counts, enc, _ = predict_counts(state, split.images[idx].astype(np.float64), text, prompts)
            preds.extend(np.atleast_1d(counts.data).tolist())
            emb = enc.image_embedding.data
            cos = (emb * text).sum(1) / (np.linalg.norm(emb, axis=1) * np.linalg.norm(text, axis=1))
            align.extend(cos.tolist())
            if collect_embeddings:
                embs.append(emb.copy())
    out = (np.array(preds), np.array(align))
    if collect_embeddings:
        return out + (np.concatenate(embs) if embs else np.zeros((0, state.config.model.joint_dim)),)
    return out


def evaluate(ckpt, split: SplitArrays, mode: str = "sdvpt", k: int | None = None, batch_size: int = 32) -> EvalReport:
    state, h = _load_state(ckpt)
    _require_mode(state, mode)
    k = state.config.inference_k if k is None else k
    if mode in ("sdvpt", "cspi_only") and not 1 <= k <= state.table.n_seen:
        raise ValueError(f"K={k} outside [1, {state.table.n_seen}]")
    preds, align = run_inference(state, split, mode, k, batch_size)
    gts = split.counts.astype(np.float64)
    m = metrics(preds, gts)
    return EvalReport(
        split=split.name, mode=mode, k=k if mode in ("sdvpt", "cspi_only") else None,
        gts=gts.tolist(), preds=preds.tolist(), mae=m.mae, rmse=m.rmse, nae=m.nae, sre=m.sre,
        mean_alignment=float(np.mean(align)), checkpoint_hash=h, config=state.config.to_dict(),
    )


def sweep_topk(ckpt, split: SplitArrays, k_values: Sequence[int], mode: str = "sdvpt", out_csv=None) -> list[dict]:
    state, h = _load_state(ckpt)
    _require_mode(state, mode)
    for k in k_values:
        if not 1 <= k <= state.table.n_seen:
            raise ValueError(f"K={k} outside [1, {state.table.n_seen}]")
    rows = []
    for k in k_values:
        r = evaluate(state, split, mode, k)
        rows.append({"k": k, "mae": r.mae, "rmse": r.rmse})
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["k", "mae", "rmse"])
            w.writeheader()
            w.writerows(rows)
    return rows


EMBED_HEADER = ["kind", "split", "category_id", "category_name", "sample_index"]


def export_embeddings(ckpt, splits: Sequence[SplitArrays], out_csv, mode: str = "sdvpt", k: int | None = None) -> int:
    """Write image and text embeddings to CSV; returns the number of data rows.

    Columns: kind (image|text), split (sample split, or seen|unseen for
    text rows), category_id, category_name, sample_index (-1 for text),
    then e0..e{D-1}.
    """
    state, _ = _load_state(ckpt)
    _require_mode(state, mode)
    k = state.config.inference_k if k is None else k
    dim = state.table.dim
    n = 0
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EMBED_HEADER + [f"e{i}" for i in range(dim)])
        for split in splits:
            _, _, embs = run_inference(state, split, mode, k, collect_embeddings=True)
            for i, (c, e) in enumerate(zip(split.category_ids, embs)):
                w.writerow(["image", split.name, int(c), state.table.category_names[c], i] + [repr(float(x)) for x in e])
                n += 1
        for c in range(state.table.n_categories):
            tag = "seen" if state.table.seen_mask[c] else "unseen"
            w.writerow(["text", tag, c, state.table.category_names[c], -1]
                       + [repr(float(x)) for x in state.table.embeddings[c]])
            n += 1
    return n


def bench_overhead(ckpt, split: SplitArrays, k: int | None = None, n_images: int = 32, repeats: int = 3) -> dict:
    """Per-image inference time with a fixed prompt vs. re-synthesizing it per image."""
    state, h = _load_state(ckpt)
    k = state.config.inference_k if k is None else k
    n_images = min(n_images, len(split))
    cfg = state.config
    l, t, d = state.prompts.block_shape
    c0 = int(split.category_ids[0])
    fixed = synthesized_prompts(state, [c0], k)

    def one(i, resynth):
        img = split.images[i:i + 1].astype(np.float64)
        text = state.table.embeddings[[c0]]
        prompts = synthesized_prompts(state, [c0], k) if resynth else fixed
        counts, _, _ = predict_counts(state, img, text, prompts)
        return float(counts.data[0])

    timings = {False: [], True: []}
    preds = {False: [], True: []}
    with nx.checked(False):
        one(0, False)  # warm-up
        for _ in range(repeats):
            for resynth in (False, True):
                for i in range(n_images):
                    t0 = time.perf_counter()
                    p = one(i, resynth)
                    timings[resynth].append(time.perf_counter() - t0)
                    if len(preds[resynth]) < n_images:
                        preds[resynth].append(p)
    fixed_t = float(np.median(timings[False]))
    synth_t = float(np.median(timings[True]))
    head_params = sum(v.size for v in state.head.values())
    return {
        "k": k,
        "n_images": n_images,
        "median_fixed_s": fixed_t,
        "median_synth_s": synth_t,
        "relative_overhead": synth_t / fixed_t - 1.0,
        "synthesis_ops": synthesis_op_count(k, l, t, d),
        "identical_predictions": preds[False] == preds[True],
        "params": {
            "backbone": state.backbone.n_params(),
            "head": int(head_params),
            "prompt_set": int(state.prompts.values.size),
            "prompt_set_formula": f"{state.prompts.shape[0]}*{l}*{t}*{d}",
        },
        "checkpoint_hash": h,
        "seed": cfg.seed,
    }


def save_report(report: EvalReport, path) -> None:
    Path(path).write_text(report.to_json())
