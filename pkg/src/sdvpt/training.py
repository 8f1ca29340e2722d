"""Two-stage prompt training.

Stage 0 (pretraining) fits the backbone contrastively and freezes it.
Stage 1 learns one prompt per seen category; stage 2 replaces the
category's own prompt by a similarity-weighted fusion of its top-K nearest
seen categories and anchors that fusion to the category prompt.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Callable

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import SplitArrays, load_dataset
from .encoder import FrozenError, MiniViT, encode
from .head import count, decode, init_head_params, similarity_map
from .losses import contrastive_loss, loss_cspi, loss_tgpr, mse_count_loss, recon_loss
from .numerics import Tensor
from .optim import Adam
from .prompts import BasePromptSet, fuse_batch, init_prompt_set, select_batch
from .text_space import TextEmbeddingTable, TopKSelection, topk_similar

log = logging.getLogger(__name__)

STAGE_CODES = {"stage0": 0, "cspi": 1, "tgpr": 2, "shared": 3}
SHARED_ID = -1


class StageOrderError(RuntimeError):
    pass


class DataError(ValueError):
    pass


@dataclass
class TrainState:
    config: TrainConfig
    table: TextEmbeddingTable
    backbone: MiniViT
    head: dict[str, Tensor]
    prompts: BasePromptSet
    optimizer: Adam
    stage: str = "init"
    epoch: int = 0
    variant: str = "sdvpt"

    def trainable(self) -> dict[str, Tensor]:
        params = {f"head/{k}": v for k, v in self.head.items()}
        params["prompts"] = self.prompts.values
        return params

    def zero_grad(self) -> None:
        for t in self.trainable().values():
            t.grad = None

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"vit/{k}": v for k, v in self.backbone.arrays().items()}
        arrays.update({f"head/{k}": t.data for k, t in self.head.items()})
        arrays["prompts/values"] = self.prompts.values.data
        arrays["text/embeddings"] = self.table.embeddings
        arrays.update(self.optimizer.state_arrays())
        return arrays

    def meta(self) -> dict:
        return {
            "stage": self.stage,
            "epoch": self.epoch,
            "variant": self.variant,
            "config": self.config.to_dict(),
            "prompt_category_ids": list(self.prompts.category_ids),
            "category_names": list(self.table.category_names),
            "seen": [bool(s) for s in self.table.seen_mask],
            "backbone_frozen": self.backbone.frozen,
        }


def save_state(state: TrainState, path) -> Checkpoint:
    return save_checkpoint(path, state.to_arrays(), state.meta())


def state_from_checkpoint(ckpt: Checkpoint | str | Path) -> TrainState:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    meta, arrays = ckpt.meta, ckpt.arrays
    cfg = TrainConfig.from_dict(meta["config"])
    table = TextEmbeddingTable(arrays["text/embeddings"], meta["category_names"], np.array(meta["seen"], dtype=bool))
    vit = MiniViT.from_arrays(
        cfg.model, {k[4:]: v for k, v in arrays.items() if k.startswith("vit/")}, frozen=meta["backbone_frozen"]
    )
    head = {k[5:]: Tensor(np.array(v), requires_grad=True) for k, v in arrays.items() if k.startswith("head/")}
    prompts = BasePromptSet(Tensor(np.array(arrays["prompts/values"]), requires_grad=True), tuple(meta["prompt_category_ids"]))
    opt = _make_optimizer(cfg)
    opt.load_state_arrays(arrays)
    return TrainState(cfg, table, vit, head, prompts, opt, meta["stage"], meta["epoch"], meta["variant"])


def _make_optimizer(cfg: TrainConfig) -> Adam:
    overrides = {} if cfg.prompt_lr is None else {"prompts": cfg.prompt_lr}
    return Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, row_sparse=["prompts"],
                lr_overrides=overrides)


# batching


def make_batches(category_ids: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches of sample indices with distinct categories where possible."""
    pools: dict[int, list[int]] = {}
    for i in rng.permutation(len(category_ids)):
        pools.setdefault(int(category_ids[i]), []).append(int(i))
    batches = []
    while pools:
        cats = list(pools)
        # most remaining first, random tie-break, keeps categories balanced across batches
        keys = rng.random(len(cats))
        order = sorted(range(len(cats)), key=lambda j: (-len(pools[cats[j]]), keys[j]))
        batch = []
        for j in order:
            if len(batch) == batch_size:
                break
            batch.append(pools[cats[j]].pop())
        while len(batch) < batch_size and any(pools.values()):
            for c in cats:
                if pools[c] and len(batch) < batch_size:
                    batch.append(pools[c].pop())
        for c in cats:
            if not pools[c]:
                del pools[c]
        batches.append(np.array(batch))
    return batches


def epoch_rng(seed: int, stage: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, STAGE_CODES[stage], epoch])


# stage 0


def pretrain_backbone(
    model: MiniViT,
    split: SplitArrays,
    table: TextEmbeddingTable,
    steps: int,
    seed: int,
    lr: float = 1e-3,
    batch_size: int = 16,
    prompt_tokens: int = 4,
    tau: float = 0.07,
    callback: Callable[[int, float], None] | None = None,
) -> MiniViT:
    """Contrastive fit of backbone + projection with a shared zero prompt, then freeze."""
    if model.frozen:
        raise FrozenError("backbone is already frozen")
    seen = set(table.seen_ids.tolist())
    if not set(split.category_ids.tolist()) <= seen:
        raise DataError("pretraining data must come from seen categories only")
    cfg = model.config
    opt = Adam(lr)
    zero_prompt = Tensor(np.zeros((1, cfg.n_prompted, prompt_tokens, cfg.width)))
    by_cat: dict[int, np.ndarray] = {}
    for c in np.unique(split.category_ids):
        by_cat[int(c)] = np.flatnonzero(split.category_ids == c)
    cats = np.array(sorted(by_cat))
    for step in range(steps):
        rng = np.random.default_rng([seed, STAGE_CODES["stage0"], step])
        chosen = rng.choice(cats, size=min(batch_size, len(cats)), replace=False)
        idx = np.array([rng.choice(by_cat[int(c)]) for c in chosen])
        enc = encode(model, split.images[idx].astype(np.float64), zero_prompt)
        text = table.embeddings[split.category_ids[idx]]
        loss = contrastive_loss(enc.image_embedding, text, split.category_ids[idx], tau)
        for t in model.params.values():
            t.grad = None
        loss.backward()
        opt.step(model.params)
        if callback is not None:
            callback(step, loss.item())
    model.freeze()
    return model


# stages 1 and 2


def init_state(config: TrainConfig, table: TextEmbeddingTable, backbone: MiniViT, variant: str = "sdvpt") -> TrainState:
    backbone.require_frozen()
    cfg = config.model
    head = {
        k: Tensor(v, requires_grad=True)
        for k, v in init_head_params(cfg.joint_dim, config.head, config.seed + 101, cfg.grid).items()
    }
    if variant == "sdvpt":
        ids = table.seen_ids.tolist()
        prompts = init_prompt_set(len(ids), cfg.n_prompted, config.prompt_tokens, cfg.width, config.seed + 202, ids)
    elif variant == "shared_vpt":
        prompts = init_prompt_set(1, cfg.n_prompted, config.prompt_tokens, cfg.width, config.seed + 202, [SHARED_ID])
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return TrainState(config, table, backbone, head, prompts, _make_optimizer(config), "pretrained", 0, variant)


def predict_counts(state: TrainState, images: np.ndarray, text: np.ndarray, prompts: Tensor | None):
    enc = encode(state.backbone, images, prompts)
    sim = similarity_map(enc.patch_embeddings, text)
    density = decode(sim, enc.patch_embeddings, state.head)
    return count(density), enc, density


def _contrastive(state: TrainState, image_emb: Tensor, cats: np.ndarray) -> Tensor:
    cfg = state.config
    text = state.table.embeddings[cats]
    if cfg.contrastive_negatives == "all_seen":
        from .losses import contrastive_loss_all

        return contrastive_loss_all(image_emb, cats, state.table, cfg.loss_weights.tau)
    return contrastive_loss(image_emb, text, cats, cfg.loss_weights.tau)


def _selection_cache(state: TrainState) -> dict[int, TopKSelection]:
    cfg = state.config
    return {
        int(c): topk_similar(state.table.embedding(int(c)), state.table, cfg.k, exclude=int(c),
                             nonnegative_weights=cfg.nonnegative_weights)
        for c in state.table.seen_ids
    }


def batch_loss(state: TrainState, split: SplitArrays, idx: np.ndarray, stage: str,
               selections: dict[int, TopKSelection] | None = None):
    """Loss tensor, component floats and prompt rows touched for one batch."""
    cfg, w = state.config, state.config.loss_weights
    cats = split.category_ids[idx]
    images = split.images[idx].astype(np.float64)
    text = state.table.embeddings[cats]
    l_recon = None
    if stage == "shared":
        prompts = state.prompts.values
        rows = {0}
    elif stage == "cspi":
        prompts = select_batch(state.prompts, cats)
        rows = {state.prompts.slot(c) for c in cats}
    elif stage == "tgpr":
        sels = [selections[int(c)] for c in cats]
        prompts = fuse_batch(state.prompts, sels, cfg.normalize_fusion_weights)
        rows = {state.prompts.slot(i) for s in sels for i in s.indices}
        if w.lambda3 > 0:
            own = select_batch(state.prompts, cats)
            l_recon = recon_loss(prompts, own, cfg.recon_metric)
            rows |= {state.prompts.slot(c) for c in cats}
    else:
        raise ValueError(stage)
    counts, enc, _ = predict_counts(state, images, text, prompts)
    l_mse = mse_count_loss(counts, split.counts[idx])
    l_con = _contrastive(state, enc.image_embedding, cats)
    if stage == "tgpr" and l_recon is not None:
        total = loss_tgpr(l_mse, l_con, l_recon, w)
    else:
        total = loss_cspi(l_mse, l_con, w)
    parts = {
        "l_mse": l_mse.item(),
        "l_con": l_con.item(),
        "l_recon": None if l_recon is None else l_recon.item(),
        "total": total.item(),
    }
    return total, parts, sorted(rows)


def _check_split(state: TrainState, split: SplitArrays) -> None:
    if state.variant == "sdvpt":
        known = set(state.prompts.category_ids)
    else:
        known = set(state.table.seen_ids.tolist())
    bad = set(split.category_ids.tolist()) - known
    if bad:
        raise DataError(f"categories {sorted(bad)} are not seen training categories")


def _run_stage(state: TrainState, split: SplitArrays, stage: str, epochs: int, log_fh: IO | None) -> TrainState:
    state.backbone.require_frozen()
    _check_split(state, split)
    cfg = state.config
    selections = _selection_cache(state) if stage == "tgpr" else None
    with nx.checked(cfg.checked):
        for _ in range(epochs):
            epoch = state.epoch + 1
            batches = make_batches(split.category_ids, cfg.batch_size, epoch_rng(cfg.seed, stage, epoch))
            for step, idx in enumerate(batches):
                state.zero_grad()
                total, parts, rows = batch_loss(state, split, idx, stage, selections)
                total.backward()
                state.optimizer.step(state.trainable(), rows={"prompts": rows})
                if log_fh is not None:
                    rec = {"epoch": epoch, "stage": stage, "step": step, **parts}
                    log_fh.write(json.dumps(rec) + "\n")
            state.epoch = epoch
            log.debug("%s epoch %d done", stage, epoch)
    state.zero_grad()
    return state


def run_cspi(state: TrainState, split: SplitArrays, epochs: int, log_fh: IO | None = None) -> TrainState:
    if state.variant != "sdvpt":
        raise StageOrderError("category-specific stage needs a per-category prompt set")
    if state.stage not in ("pretrained", "cspi"):
        raise StageOrderError(f"cannot run CSPI after stage {state.stage!r}")
    _run_stage(state, split, "cspi", epochs, log_fh)
    state.stage = "cspi"
    return state


def run_tgpr(state: TrainState, split: SplitArrays, epochs: int, log_fh: IO | None = None,
             allow_without_cspi: bool = False) -> TrainState:
    if state.variant != "sdvpt":
        raise StageOrderError("refinement stage needs a per-category prompt set")
    ok = ("cspi", "tgpr") + (("pretrained",) if allow_without_cspi else ())
    if state.stage not in ok:
        raise StageOrderError(f"refinement requires a completed CSPI stage, state is {state.stage!r}")
    _run_stage(state, split, "tgpr", epochs, log_fh)
    state.stage = "tgpr"
    return state


def run_shared(state: TrainState, split: SplitArrays, epochs: int, log_fh: IO | None = None) -> TrainState:
    if state.variant != "shared_vpt":
        raise StageOrderError("shared baseline needs a single shared prompt")
    _run_stage(state, split, "shared", epochs, log_fh)
    state.stage = "shared_vpt"
    return state


# end-to-end drivers


def build_backbone(config: TrainConfig, train_split: SplitArrays, table: TextEmbeddingTable) -> MiniViT:
    model = MiniViT.create(config.model, config.seed)
    with nx.checked(config.checked):
        return pretrain_backbone(
            model, train_split, table, config.stage0_steps, config.seed, config.stage0_lr,
            config.batch_size, config.prompt_tokens, config.loss_weights.tau,
        )


def backbone_from(path) -> MiniViT:
    st = state_from_checkpoint(path)
    st.backbone.require_frozen()
    return st.backbone


def save_backbone(backbone: MiniViT, config: TrainConfig, table: TextEmbeddingTable, path) -> Checkpoint:
    state = init_state(config, table, backbone)
    state.stage = "pretrained"
    return save_state(state, path)


def train(config: TrainConfig, dataset_dir, out_dir, backbone: MiniViT | str | Path | None = None,
          resume: str | Path | None = None, stop_after: str | None = None) -> Checkpoint:
    """Stage 0 -> freeze -> CSPI(e1) -> TGPR(e2 - e1), checkpointing each stage.

    ``resume`` continues from a CSPI checkpoint. ``stop_after="cspi"`` ends
    after stage 1 (used to test interrupt/resume).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(dataset_dir)
    train_split = ds.split("train")
    if resume is not None:
        state = state_from_checkpoint(resume)
        if state.config.to_dict() != config.to_dict():
            raise ValueError("resume checkpoint was produced with a different config")
        mode = "a"
    else:
        if backbone is None:
            bb = build_backbone(config, train_split, ds.table)
        elif isinstance(backbone, MiniViT):
            bb = backbone
        else:
            bb = backbone_from(backbone)
        save_backbone(bb, config, ds.table, out / "stage0")
        state = init_state(config, ds.table, bb, "sdvpt")
        mode = "w"
    log_path = out / "train_log.jsonl"
    with open(log_path, mode) as fh:
        if state.stage == "pretrained":
            if config.e1 > 0:
                run_cspi(state, train_split, config.e1, fh)
                save_state(state, out / "cspi")
            if stop_after == "cspi":
                return load_checkpoint(out / "cspi")
        if state.stage in ("cspi", "pretrained"):
            run_tgpr(state, train_split, config.e2 - config.e1, fh, allow_without_cspi=config.e1 == 0)
    return save_state(state, out / "final")


def train_baseline(config: TrainConfig, dataset_dir, out_dir, backbone: MiniViT | str | Path | None = None) -> Checkpoint:
    """Shared single-prompt VPT baseline trained for e2 epochs with the stage-1 loss."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(dataset_dir)
    train_split = ds.split("train")
    if backbone is None:
        bb = build_backbone(config, train_split, ds.table)
    elif isinstance(backbone, MiniViT):
        bb = backbone
    else:
        bb = backbone_from(backbone)
    state = init_state(config, ds.table, bb, "shared_vpt")
    with open(out / "train_log.jsonl", "w") as fh:
        run_shared(state, train_split, config.e2, fh)
    return save_state(state, out / "final")
