"""Command line front end.

Every subcommand takes ``--config`` (JSON, see ``config.py``) plus ``--seed``
to override the run seed without editing the file. Artifacts land under
``--out``. Set OMP_NUM_THREADS=1 (and the BLAS equivalents) before invoking
if you need bit-identical outputs across machines with different thread
counts.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import harness
from .cascade import CascadeConfig
from .config import TrainConfig, load_config
from .errors import CmntmError
from .synthdata import gen_distractor, load_dataset, save_dataset


def _resolve_config(args: argparse.Namespace) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    counts = {"train": cfg.train_count, "val": cfg.val_count, "test": cfg.val_count}
    for split in args.splits.split(","):
        split = split.strip()
        if split not in counts:
            raise CmntmError(f"unknown split {split!r} (expected train, val, or test)")
        dataset = gen_distractor(cfg.task, counts[split], split=split)
        path = f"{args.out}/{split}.jsonl"
        os.makedirs(args.out, exist_ok=True)
        save_dataset(dataset, path)
        print(f"{split}: {len(dataset.transactions)} transactions, "
              f"db {len(dataset.db)} items -> {path}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    train_ds = val_ds = None
    if args.data:
        train_ds = load_dataset(f"{args.data}/train.jsonl")
        val_ds = load_dataset(f"{args.data}/val.jsonl")
    result = harness.train(cfg, out_dir=args.out, train_ds=train_ds, val_ds=val_ds,
                           resume_from=args.resume, log=print)
    if result.metrics:
        last = result.metrics[-1]
        print(f"final: epoch {last['epoch']} train_loss {last['train_loss']:.6f} "
              f"mean_r5_r8 {last['mean_r5_r8']:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def _load_eval_dataset(args: argparse.Namespace, cfg: TrainConfig):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return gen_distractor(cfg.task, cfg.val_count, split="val")


def _cmd_eval(args: argparse.Namespace) -> int:
    ckpt = harness.load_checkpoint(args.checkpoint)
    model = harness.restore_model(ckpt)
    dataset = _load_eval_dataset(args, ckpt.cfg)
    report = harness.evaluate_model(model, dataset, ckpt.cfg.eval_batch_size, ckpt.cfg.seed)
    _print_json(report)
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    err = harness.full_model_gradient_check(
        num_stages=args.stages, mem_locations=args.locations, mem_width=args.width,
        feature_dim=args.feature_dim, hidden_size=args.hidden, turns=args.turns,
        batch=args.batch, h=args.h, seed=args.seed or 0)
    ok = err <= args.tol
    print(f"max relative error {err:.3e} (tolerance {args.tol:.1e}): "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def _cmd_ablate_memories(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    stage_counts = [int(s) for s in args.stages.split(",")]
    rows = harness.ablate_num_memories(cfg, stage_counts, out_dir=args.out, log=print)
    for row in rows:
        print(f"C={row['C']}: mean_r5_r8 {row['mean_r5_r8']:.6f} "
              f"({row['pct_change_vs_first']:+.2f}% vs C={rows[0]['C']})")
    return 0


def _cmd_turn_importance(args: argparse.Namespace) -> int:
    ckpt = harness.load_checkpoint(args.checkpoint)
    model = harness.restore_model(ckpt)
    base_ckpt = harness.load_checkpoint(args.baseline_checkpoint)
    baseline = harness.restore_model(base_ckpt)
    dataset = _load_eval_dataset(args, ckpt.cfg)
    summary = harness.turn_importance(model, baseline, dataset, ckpt.cfg.task.block_len,
                                      ckpt.cfg.eval_batch_size, ckpt.cfg.seed,
                                      out_dir=args.out)
    _print_json(summary)
    return 0


def _cmd_turn_order(args: argparse.Namespace) -> int:
    ckpt = harness.load_checkpoint(args.checkpoint)
    model = harness.restore_model(ckpt)
    dataset = _load_eval_dataset(args, ckpt.cfg)
    report = harness.turn_order_experiment(model, dataset, count=args.count,
                                           eval_batch_size=ckpt.cfg.eval_batch_size,
                                           seed=ckpt.cfg.seed, out_dir=args.out)
    _print_json(report)
    return 0


def _cmd_memory_retention(args: argparse.Namespace) -> int:
    ckpt = harness.load_checkpoint(args.checkpoint)
    model = harness.restore_model(ckpt)
    dataset = _load_eval_dataset(args, ckpt.cfg)
    report = harness.memory_retention_experiment(model, dataset, ckpt.cfg.task.block_len,
                                                 ckpt.cfg.eval_batch_size, ckpt.cfg.seed,
                                                 out_dir=args.out)
    _print_json(report)
    return 0


def _cmd_time(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    stage_counts = [int(s) for s in args.stages.split(",")]
    sizes = []
    for token in args.sizes.split(","):
        p, _, m = token.partition("x")
        sizes.append((int(p), int(m)))
    configs = [dataclasses.replace(cfg.cascade, num_stages=c, mem_locations=p, mem_width=m)
               for (p, m) in sizes for c in stage_counts]
    rows = harness.timing_experiment(configs, cfg.task, txn_count=args.txns,
                                     warmup=args.warmup, seed=cfg.seed,
                                     checkpoint_path=args.checkpoint, out_dir=args.out)
    for row in rows:
        print(f"C={row['C']} P={row['P']} M={row['M']}: {row['ms_per_txn']:.3f} ms/txn")
    if args.check:
        harness.check_timing_monotone(rows)
        print("timing monotone in stage count: PASS")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmntm",
                                     description="cascaded memory retrieval models")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None, out_required=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", default=out_default, required=out_required,
                       help="output directory")

    p = sub.add_parser("gen-data", help="generate synthetic datasets")
    common(p, out_required=True)
    p.add_argument("--splits", default="train,val", help="comma list: train,val,test")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p, out_required=True)
    p.add_argument("--data", help="directory holding train.jsonl and val.jsonl")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset file (defaults to the checkpoint's val split)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of a small full model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stages", type=int, default=2)
    p.add_argument("--locations", type=int, default=4)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--turns", type=int, default=3)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("ablate-memories", help="train at several cascade depths")
    common(p, out_required=True)
    p.add_argument("--stages", default="1,2", help="comma list of stage counts")
    p.set_defaults(func=_cmd_ablate_memories)

    p = sub.add_parser("turn-importance", help="recall vs history length")
    common(p)
    p.add_argument("--checkpoint", required=True, help="memory model checkpoint")
    p.add_argument("--baseline-checkpoint", required=True, help="memory-less checkpoint")
    p.add_argument("--data", help="dataset file (defaults to the checkpoint's val split)")
    p.set_defaults(func=_cmd_turn_importance)

    p = sub.add_parser("turn-order", help="stability under permuted turn order")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset file")
    p.add_argument("--count", type=int, default=500)
    p.set_defaults(func=_cmd_turn_order)

    p = sub.add_parser("memory-retention", help="turn-1 information in later retrievals")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset file")
    p.set_defaults(func=_cmd_memory_retention)

    p = sub.add_parser("time", help="median inference time per transaction")
    common(p)
    p.add_argument("--stages", default="1,2,4,8", help="comma list of stage counts")
    p.add_argument("--sizes", default="16x32", help="comma list of PxM memory sizes")
    p.add_argument("--txns", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--checkpoint", help="report this checkpoint's recall alongside timings")
    p.add_argument("--check", action=argparse.BooleanOptionalAction, default=True,
                   help="fail if median time decreases with stage count")
    p.set_defaults(func=_cmd_time)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CmntmError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
