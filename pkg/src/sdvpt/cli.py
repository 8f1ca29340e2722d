"""Command-line entry point (``sdvpt``).

Every subcommand accepts ``--config`` (JSON with optional "data" and
"train" sections) and ``--seed`` (overrides both seeds). Exit status is 0
on success, 2 on contract or validation errors, 1 on I/O errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import evaluation, training
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .container import FormatError
from .data import generate, load_dataset
from .encoder import FrozenError
from .numerics import ContractError, NumericError

log = logging.getLogger("sdvpt")

ABLATION_GRIDS = ("components", "recon_metric")


def _run_config(args) -> RunConfig:
    rc = load_config(args.config)
    return rc.with_seed(args.seed) if args.seed is not None else rc


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _backbone(rc: RunConfig, data_dir, given, out_dir):
    """Reuse a stored backbone or pretrain one and store it under out_dir/stage0."""
    if given:
        return training.backbone_from(given)
    ds = load_dataset(data_dir)
    bb = training.build_backbone(rc.train, ds.split("train"), ds.table)
    training.save_backbone(bb, rc.train, ds.table, Path(out_dir) / "stage0")
    return bb


def cmd_gen_data(args):
    rc = _run_config(args)
    manifest = generate(rc.data, args.out)
    sizes = {k: len(v) for k, v in manifest["splits"].items()}
    print(json.dumps({"out": str(args.out), "samples": sizes}))


def cmd_pretrain(args):
    rc = _run_config(args)
    ds = load_dataset(args.data)
    bb = training.build_backbone(rc.train, ds.split("train"), ds.table)
    ck = training.save_backbone(bb, rc.train, ds.table, args.out)
    print(json.dumps({"checkpoint": str(args.out), "hash": ck.hash}))


def cmd_train(args):
    rc = _run_config(args)
    ck = training.train(rc.train, args.data, args.out, backbone=args.backbone, resume=args.resume,
                        stop_after=args.stop_after)
    print(json.dumps({"checkpoint": str(ck.path), "hash": ck.hash, "stage": ck.stage}))


def cmd_train_baseline(args):
    rc = _run_config(args)
    ck = training.train_baseline(rc.train, args.data, args.out, backbone=args.backbone)
    print(json.dumps({"checkpoint": str(ck.path), "hash": ck.hash}))


def cmd_eval(args):
    split = load_dataset(args.data).split(args.split)
    report = evaluation.evaluate(args.checkpoint, split, args.mode, args.k)
    if args.out:
        evaluation.save_report(report, args.out)
    print(json.dumps({"split": report.split, "mode": report.mode, "k": report.k, "mae": report.mae,
                      "rmse": report.rmse, "nae": report.nae, "sre": report.sre,
                      "mean_alignment": report.mean_alignment}))


def _k_list(text: str) -> list[int]:
    try:
        return [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad K list {text!r}") from None


def cmd_sweep_topk(args):
    split = load_dataset(args.data).split(args.split)
    rows = evaluation.sweep_topk(args.checkpoint, split, args.k_values, args.mode, args.out)
    print(json.dumps(rows))


def ablation_rows(rc: RunConfig, grid: str) -> list[tuple[str, object, str, str]]:
    """(row name, train config, trainer, eval mode) for one ablation grid."""
    cfg = rc.train
    w = cfg.loss_weights
    if grid == "components":
        return [
            ("cspi_only", cfg, "cspi", "cspi_only"),
            ("tgpr_only", cfg.with_(e1=0), "sdvpt", "sdvpt"),
            ("cspi_tgpr_no_recon", cfg.with_(loss_weights=replace(w, lambda3=0.0)), "sdvpt", "sdvpt"),
            ("full", cfg, "sdvpt", "sdvpt"),
            ("shared_vpt", cfg, "shared", "shared_vpt"),
        ]
    if grid == "recon_metric":
        return [
            ("recon_l2", cfg.with_(recon_metric="l2"), "sdvpt", "sdvpt"),
            ("recon_cosine", cfg.with_(recon_metric="cosine"), "sdvpt", "sdvpt"),
        ]
    raise ValueError(f"unknown ablation grid {grid!r}; expected one of {ABLATION_GRIDS}")


def run_ablation(rc: RunConfig, data_dir, out_dir, grid: str, backbone=None, split_name: str = "test") -> dict:
    out = Path(out_dir)
    rows = ablation_rows(rc, grid)
    bb = _backbone(rc, data_dir, backbone, out)
    split = load_dataset(data_dir).split(split_name)
    results = []
    for name, cfg, trainer, mode in rows:
        row_dir = out / name
        if trainer == "shared":
            ck = training.train_baseline(cfg, data_dir, row_dir, backbone=bb)
        elif trainer == "cspi":
            ck = training.train(cfg, data_dir, row_dir, backbone=bb, stop_after="cspi")
        else:
            ck = training.train(cfg, data_dir, row_dir, backbone=bb)
        rep = evaluation.evaluate(ck, split, mode)
        evaluation.save_report(rep, row_dir / f"report_{split_name}.json")
        results.append({
            "row": name, "mode": mode, "k": rep.k, "recon_metric": cfg.recon_metric,
            "lambda3": cfg.loss_weights.lambda3, "e1": cfg.e1, "e2": cfg.e2,
            "mae": rep.mae, "rmse": rep.rmse, "nae": rep.nae, "sre": rep.sre,
            "mean_alignment": rep.mean_alignment, "checkpoint_hash": rep.checkpoint_hash,
        })
        log.info("ablation %s/%s: MAE %.3f", grid, name, rep.mae)
    report = {"grid": grid, "split": split_name, "seed": rc.train.seed, "rows": results}
    _write_json(out / f"ablation_{grid}.json", report)
    return report


def cmd_ablate(args):
    rc = _run_config(args)
    grids = ABLATION_GRIDS if args.grid == "all" else (args.grid,)
    reports = [run_ablation(rc, args.data, args.out, g, args.backbone, args.split) for g in grids]
    for rep in reports:
        for row in rep["rows"]:
            print(f"{rep['grid']:>13} {row['row']:>20}  MAE {row['mae']:8.3f}  RMSE {row['rmse']:8.3f}")


def cmd_export_embeddings(args):
    ds = load_dataset(args.data)
    splits = [ds.split(s) for s in args.splits.split(",") if s]
    n = evaluation.export_embeddings(args.checkpoint, splits, args.out, args.mode, args.k)
    print(json.dumps({"out": str(args.out), "rows": n}))


def cmd_bench(args):
    split = load_dataset(args.data).split(args.split)
    report = evaluation.bench_overhead(args.checkpoint, split, args.k, args.n_images, args.repeats)
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(report))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="run configuration JSON")
    common.add_argument("--seed", type=int, default=None, help="override data and training seeds")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sdvpt", description="Category-prompted counting on a synthetic benchmark")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain", parents=[common], help="contrastively pretrain and freeze the backbone")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", parents=[common], help="two-stage prompt training")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--backbone", type=Path, help="checkpoint holding a frozen backbone")
    s.add_argument("--resume", type=Path, help="continue from a stage-1 checkpoint")
    s.add_argument("--stop-after", choices=["cspi"], default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("train-baseline", parents=[common], help="train the shared-prompt baseline")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--backbone", type=Path)
    s.set_defaults(func=cmd_train_baseline)

    def eval_args(s, mode=True):
        s.add_argument("--checkpoint", type=Path, required=True)
        s.add_argument("--data", type=Path, required=True)
        if mode:
            s.add_argument("--mode", choices=evaluation.MODES, default="sdvpt")

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on one split")
    eval_args(s)
    s.add_argument("--split", default="test")
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-topk", parents=[common], help="MAE/RMSE over a list of K")
    eval_args(s)
    s.add_argument("--split", default="test")
    s.add_argument("--k-values", type=_k_list, default=[1, 2, 4, 8, 16])
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_sweep_topk)

    s = sub.add_parser("ablate", parents=[common], help="train and evaluate an ablation grid")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--grid", choices=ABLATION_GRIDS + ("all",), default="all")
    s.add_argument("--backbone", type=Path)
    s.add_argument("--split", default="test")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("export-embeddings", parents=[common], help="dump image and text embeddings to CSV")
    eval_args(s)
    s.add_argument("--splits", default="val,test")
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_export_embeddings)

    s = sub.add_parser("bench", parents=[common], help="prompt-synthesis overhead benchmark")
    eval_args(s, mode=False)
    s.add_argument("--split", default="test")
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--n-images", type=int, default=32)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (FormatError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, ContractError, FrozenError, NumericError, training.StageOrderError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
