"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The reference benchmark runs (criteria 7-9) train three seeds of the
default configuration end to end and take the median over seeds.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from sdvpt import container, evaluation, numerics as nx, training
from sdvpt.cli import main as cli_main
from sdvpt.config import RunConfig
from sdvpt.data import generate, load_dataset
from sdvpt.encoder import MiniViT, MiniViTConfig, encode
from sdvpt.gradcheck import finite_diff_check
from sdvpt.metrics import metrics
from sdvpt.numerics import Tensor
from sdvpt.prompts import BasePromptSet, fuse
from sdvpt.text_space import TextEmbeddingTable, topk_similar

from conftest import tiny_config

REFERENCE_SEEDS = (0, 1, 2)
SWEEP_K = (1, 2, 4, 8, 16)
RUNTIME_BUDGET_S = 45 * 60


# 1 -------------------------------------------------------------------------

def test_criterion_01_gradient_correctness(tmp_path, record_criterion):
    t0 = time.perf_counter()
    rc = tiny_config(k=2, prompt_tokens=2).with_seed(3)
    rc = RunConfig(rc.data.__class__(**{**rc.data.__dict__, "n_seen": 4, "n_unseen": 1}), rc.train)
    generate(rc.data, tmp_path)
    ds = load_dataset(tmp_path)
    assert ds.table.n_seen == 4 and rc.train.model.depth == 2 and rc.train.model.width == 16
    bb = MiniViT.create(rc.train.model, 0)
    bb.freeze()
    state = training.init_state(rc.train, ds.table, bb)
    split = ds.split("train")
    idx = np.array([0, 4, 8, 12])
    sels = training._selection_cache(state)
    params = state.trainable()

    def loss():
        return training.batch_loss(state, split, idx, "tgpr", sels)[0]

    with nx.checked(True):
        err = finite_diff_check(loss, list(params.values()), eps=1e-6)
    elapsed = time.perf_counter() - t0
    n_coords = sum(p.size for p in params.values())
    ok = err < 1e-3 and elapsed < 60
    record_criterion(1, "full refinement-loss gradient vs central differences",
                     ok, f"max rel err {err:.2e} over {n_coords} coords, {elapsed:.1f}s")
    assert ok


# 2 -------------------------------------------------------------------------

def _brute_force_fuse(query, emb, seen, values, k, exclude):
    cands = []
    for c in range(len(emb)):
        if seen[c] and c != exclude:
            s = float(query @ emb[c] / (math.sqrt(query @ query) * math.sqrt(emb[c] @ emb[c])))
            cands.append((-s, c, s))
    cands.sort()
    chosen = cands[:k]
    slot = {c: i for i, c in enumerate(np.flatnonzero(seen))}
    out = np.zeros(values.shape[1:])
    for _, c, s in chosen:
        out = out + s * values[slot[c]]
    return [c for _, c, _ in chosen], out


def test_criterion_02_fusion_oracle(record_criterion):
    rng = np.random.default_rng(2024)
    n_cases = 0
    n_training_mode = 0
    worst = 0.0
    index_ok = excl_ok = True
    for case in range(300):
        n = int(rng.integers(3, 30))
        d = int(rng.integers(2, 12))
        emb = rng.normal(size=(n, d))
        seen = rng.random(n) < 0.75
        seen[:3] = True
        table = TextEmbeddingTable(emb, [f"c{i}" for i in range(n)], seen)
        seen_ids = np.flatnonzero(seen)
        values = rng.normal(size=(len(seen_ids), 2, 3, 4))
        ps = BasePromptSet(Tensor(values), tuple(int(c) for c in seen_ids))
        training_mode = case % 2 == 0
        exclude = int(rng.choice(seen_ids)) if training_mode else None
        query = emb[exclude] if training_mode else rng.normal(size=d)
        k = int(rng.integers(1, len(seen_ids) - (1 if training_mode else 0) + 1))
        sel = topk_similar(query, table, k, exclude=exclude)
        fused = fuse(ps, sel).values.data
        idx, ref = _brute_force_fuse(query, emb, seen, values, k, exclude)
        index_ok &= list(sel.indices) == idx
        worst = max(worst, float(np.max(np.abs(fused - ref))))
        if training_mode:
            n_training_mode += 1
            excl_ok &= exclude not in sel.indices
        n_cases += 1
    ok = index_ok and excl_ok and worst <= 1e-12 and n_cases >= 200
    record_criterion(2, "top-K selection + fusion vs brute-force oracle", ok,
                     f"{n_cases} instances, {n_training_mode} with self-exclusion, max |diff| {worst:.1e}")
    assert ok


# 3 -------------------------------------------------------------------------

def test_criterion_03_metric_oracles(record_criterion):
    m = metrics([3, 5], [1, 5])
    worked = (abs(m.mae - 1.0) <= 1e-12 and abs(m.rmse - math.sqrt(2)) <= 1e-12
              and abs(m.nae - 1.0) <= 1e-12 and abs(m.sre - math.sqrt(2)) <= 1e-12)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(1, 60))
        g = rng.integers(1, 50, size=n).astype(float)
        p = g + rng.normal(scale=6, size=n)
        a = s2 = na = sr = 0.0
        for pi, gi in zip(p, g):
            e = pi - gi
            a += abs(e)
            s2 += e * e
            na += abs(e) / gi
            sr += e * e / gi
        ref = (a / n, math.sqrt(s2 / n), na / n, math.sqrt(sr / n))
        got = metrics(p, g)
        worst = max(worst, max(abs(x - y) / max(1.0, abs(y)) for x, y in zip(got, ref)))
    ok = worked and worst <= 1e-12
    record_criterion(3, "MAE/RMSE/NAE/SRE vs hand and loop oracles", ok,
                     f"worked example {'ok' if worked else 'wrong'}, max rel diff {worst:.1e}")
    assert ok


# 4 -------------------------------------------------------------------------

def test_criterion_04_prompt_removal_invariant(record_criterion):
    cfg = MiniViTConfig()
    model = MiniViT.create(cfg, 0)
    model.freeze()
    rng = np.random.default_rng(0)
    imgs = rng.uniform(size=(2, cfg.image_size, cfg.image_size, cfg.channels))
    shapes = set()
    for t in (1, 2, 4, 7):
        out = encode(model, imgs, Tensor(rng.normal(0, 0.1, size=(2, cfg.n_prompted, t, cfg.width))))
        shapes.add((out.cls_embedding.shape, out.patch_embeddings.shape))
    plain = encode(model, imgs)
    empty = encode(model, imgs, Tensor(np.zeros((2, cfg.n_prompted, 0, cfg.width))))
    bitwise = (plain.cls_embedding.data.tobytes() == empty.cls_embedding.data.tobytes()
               and plain.patch_embeddings.data.tobytes() == empty.patch_embeddings.data.tobytes())
    ok = len(shapes) == 1 and bitwise and plain.patch_embeddings.shape[1] == cfg.n_patches
    record_criterion(4, "encoder output independent of prompt length; T=0 bit-identical", ok,
                     f"shapes {shapes.pop()}, T=0 bitwise {'equal' if bitwise else 'different'}")
    assert ok


# 5 -------------------------------------------------------------------------

def _touched_rows(before, after):
    diff = (before != after).reshape(len(before), -1)
    return set(np.flatnonzero(diff.any(axis=1)).tolist())


def test_criterion_05_freeze_discipline(tiny_data, tiny_backbone, tmp_path, record_criterion):
    rc = tiny_config(e1=2, e2=4, k=2)
    ds = load_dataset(tiny_data)
    bb = training.backbone_from(tiny_backbone)
    bb_hash, table_hash = bb.param_hash(), ds.table.fingerprint()
    split = ds.split("train")
    state = training.init_state(rc.train, ds.table, bb)
    # per-sample locality with lambda3 = 0 isolates the fused selection (K slices)
    locality_ok = True
    sels = training._selection_cache(state)
    for i in range(len(split)):
        cat = int(split.category_ids[i])
        for stage, expect in (("cspi", {state.prompts.slot(cat)}),
                              ("tgpr", {state.prompts.slot(j) for j in sels[cat].indices})):
            st = training.init_state(rc.train.with_(loss_weights=rc.train.loss_weights.__class__(lambda3=0.0)),
                                     ds.table, bb)
            before = st.prompts.values.data.copy()
            total, _, rows = training.batch_loss(st, split, np.array([i]), stage, sels)
            total.backward()
            st.optimizer.step(st.trainable(), rows={"prompts": rows})
            touched = _touched_rows(before, st.prompts.values.data)
            locality_ok &= touched == expect and len(touched) == (1 if stage == "cspi" else rc.train.k)
    training.train(rc.train, tiny_data, tmp_path, backbone=bb)
    hashes_ok = bb.param_hash() == bb_hash
    for stage in ("cspi", "final"):
        st = training.state_from_checkpoint(tmp_path / stage)
        hashes_ok &= st.backbone.param_hash() == bb_hash and st.table.fingerprint() == table_hash
    ok = bool(locality_ok and hashes_ok)
    record_criterion(5, "frozen backbone/text table; stage-1 one slice, stage-2 K slices per sample", ok,
                     f"hashes {'unchanged' if hashes_ok else 'CHANGED'}, locality {'ok' if locality_ok else 'violated'}")
    assert ok


# 6 -------------------------------------------------------------------------

def test_criterion_06_determinism(tiny_config_file, tmp_path, record_criterion):
    def full_run(out):
        data = out / "data"
        assert cli_main(["gen-data", "--config", str(tiny_config_file), "--seed", "4", "--out", str(data)]) == 0
        assert cli_main(["train", "--config", str(tiny_config_file), "--seed", "4", "--data", str(data),
                         "--out", str(out / "run")]) == 0
        assert cli_main(["eval", "--checkpoint", str(out / "run" / "final"), "--data", str(data),
                         "--out", str(out / "report.json")]) == 0
        files = [out / "run" / "final" / "weights.sdvt", out / "run" / "final" / "manifest.json",
                 out / "run" / "cspi" / "weights.sdvt", out / "run" / "train_log.jsonl", out / "report.json"]
        return [f.read_bytes() for f in files]

    a = full_run(tmp_path / "a")
    b = full_run(tmp_path / "b")
    same = [x == y for x, y in zip(a, b)]
    ok = all(same)
    record_criterion(6, "identical config+seed gives identical checkpoints, logs, reports", ok,
                     f"{sum(same)}/{len(same)} artifacts bit-identical")
    assert ok


# 7, 8, 9: reference benchmark -----------------------------------------------

@pytest.fixture(scope="session")
def reference_runs(tmp_path_factory):
    """Full pipeline on the reference benchmark for each seed, timed end to end."""
    root = tmp_path_factory.mktemp("reference")
    t0 = time.perf_counter()
    results = []
    for seed in REFERENCE_SEEDS:
        rc = RunConfig().with_seed(seed)
        out = root / f"seed{seed}"
        generate(rc.data, out / "data")
        ds = load_dataset(out / "data")
        test = ds.split("test")
        bb = training.build_backbone(rc.train, ds.split("train"), ds.table)
        training.train(rc.train, out / "data", out / "sdvpt", backbone=bb)
        training.train_baseline(rc.train, out / "data", out / "shared", backbone=bb)
        full = evaluation.evaluate(out / "sdvpt" / "final", test, "sdvpt")
        cspi = evaluation.evaluate(out / "sdvpt" / "cspi", test, "cspi_only")
        shared = evaluation.evaluate(out / "shared" / "final", test, "shared_vpt")
        sweep = evaluation.sweep_topk(out / "sdvpt" / "final", test, SWEEP_K, out_csv=out / "sweep.csv")
        res = {
            "seed": seed, "full_mae": full.mae, "cspi_mae": cspi.mae, "shared_mae": shared.mae,
            "full_align": full.mean_alignment, "shared_align": shared.mean_alignment,
            "sweep": {r["k"]: r["mae"] for r in sweep},
        }
        (out / "summary.json").write_text(json.dumps(res, indent=1))
        results.append(res)
    elapsed = time.perf_counter() - t0
    (root / "reference_summary.json").write_text(json.dumps({"elapsed_s": elapsed, "runs": results}, indent=1))
    return results, elapsed


def test_criterion_07_component_ordering(reference_runs, record_criterion):
    runs, elapsed = reference_runs
    full = float(np.median([r["full_mae"] for r in runs]))
    cspi = float(np.median([r["cspi_mae"] for r in runs]))
    shared = float(np.median([r["shared_mae"] for r in runs]))
    ok = full < cspi and full < shared and elapsed < RUNTIME_BUDGET_S
    record_criterion(7, "unseen MAE: full < stage-1-only and full < shared prompt (median of 3 seeds)", ok,
                     f"full {full:.3f}, stage-1 only {cspi:.3f}, shared {shared:.3f}, {elapsed / 60:.1f} min")
    assert ok


def test_criterion_08_interior_best_k(reference_runs, record_criterion):
    runs, _ = reference_runs
    med = {k: float(np.median([r["sweep"][k] for r in runs])) for k in SWEEP_K}
    best = min(med, key=med.get)
    ok = best not in (SWEEP_K[0], SWEEP_K[-1])
    record_criterion(8, "best unseen MAE at an interior K over {1,2,4,8,16}", ok,
                     "median MAE " + ", ".join(f"K={k}: {v:.3f}" for k, v in med.items()) + f"; best K={best}")
    assert ok


def test_criterion_09_alignment(reference_runs, record_criterion):
    runs, _ = reference_runs
    full = float(np.median([r["full_align"] for r in runs]))
    shared = float(np.median([r["shared_align"] for r in runs]))
    ok = full > shared
    record_criterion(9, "unseen image-text alignment: full > shared prompt", ok,
                     f"mean cosine full {full:.4f}, shared {shared:.4f}")
    assert ok


# 10 ------------------------------------------------------------------------

def test_criterion_10_recon_metric_ablation(tiny_config_file, tiny_data, tiny_backbone, tmp_path, record_criterion):
    code = cli_main(["ablate", "--config", str(tiny_config_file), "--data", str(tiny_data), "--out", str(tmp_path),
                     "--grid", "recon_metric", "--backbone", str(tiny_backbone)])
    report = json.loads((tmp_path / "ablation_recon_metric.json").read_text())
    metrics_seen = [r["recon_metric"] for r in report["rows"]]
    finite = all(np.isfinite(r["mae"]) for r in report["rows"])
    ok = code == 0 and metrics_seen == ["l2", "cosine"] and finite
    record_criterion(10, "ablate runs both l2 and cosine reconstruction metrics", ok,
                     ", ".join(f"{r['recon_metric']} MAE {r['mae']:.3f}" for r in report["rows"]))
    assert ok


# 11 ------------------------------------------------------------------------

def test_criterion_11_container_robustness(record_criterion):
    rng = np.random.default_rng(11)
    exact = 0
    for _ in range(1000):
        rank = int(rng.integers(0, 4))
        shape = tuple(int(s) for s in rng.integers(1, 6, size=rank))
        dtype = np.float32 if rng.random() < 0.5 else np.float64
        arr = rng.normal(size=shape).astype(dtype)
        back = container.decode(container.encode({"x": arr}))["x"]
        exact += back.dtype == arr.dtype and back.shape == arr.shape and back.tobytes() == arr.tobytes()
    blob = container.encode({"w": rng.normal(size=(3, 4)), "b": rng.normal(size=5).astype(np.float32)})
    tensors = container.decode(blob)
    payload_start = len(blob) - sum(t.nbytes + 4 for t in tensors.values())
    flips = detected = 0
    for byte in range(payload_start, len(blob)):
        for bit in range(8):
            bad = bytearray(blob)
            bad[byte] ^= 1 << bit
            flips += 1
            try:
                container.decode(bytes(bad))
            except container.FormatError:
                detected += 1
    ok = exact == 1000 and detected == flips
    record_criterion(11, "container round-trips bit-exact; every payload bit flip detected", ok,
                     f"{exact}/1000 exact, {detected}/{flips} flips detected")
    assert ok
