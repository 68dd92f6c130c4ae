"""Command-line entry point: ``macx <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace

from . import harness as hz
from .bundle import BundleError
from .synthdata import TASKS, SyntheticSpec
from .train import evaluate

log = logging.getLogger("macx")


def _run_config(args):
    run = hz.load_config(args.config) if args.config else hz.RunConfig()
    if getattr(args, "seed", None) is not None:
        run = replace(run, seeds=(args.seed,), runs=1)
    data = args.data or run.data
    out = args.out or run.output
    if not data or not out:
        raise ValueError("a data directory and an output directory are required (flags or config keys)")
    return replace(run, data=data, output=out)


def cmd_gen_data(args):
    spec = SyntheticSpec(task=args.task, instance_count=args.instances, seed=args.seed, noise=args.noise)
    train_set, val_set = hz.write_dataset_dir(args.out, spec, args.train_fraction, args.split_seed)
    print(f"wrote {len(train_set)} train / {len(val_set)} val instances to {args.out}")
    return 0


def cmd_train(args):
    run = _run_config(args)
    train_set = hz.load_split(run.data, "train")
    val_set = hz.load_split(run.data, "val")
    seed = run.seed_list[0]
    model, res = hz.run_one(run, train_set, val_set, seed)
    os.makedirs(run.output, exist_ok=True)
    hz.write_text(os.path.join(run.output, "config.txt"), run.to_text())
    hz.write_text(os.path.join(run.output, "history.csv"), hz.history_csv(res.history))
    hz.save_checkpoint(os.path.join(run.output, "checkpoint.macx"), model, seed)
    print(f"seed={seed} a2={res.a2:.6f} a4={res.a4:.6f}")
    return 0


def cmd_eval(args):
    model, seed = hz.load_checkpoint(args.checkpoint)
    data = hz.load_split(args.data, args.split)
    rep = evaluate(model, data, args.batch_size)
    print(f"seed={seed} a2={rep['a2']:.6f} a4={rep['a4']:.6f} a2_count={rep['a2_count']} a4_count={rep['a4_count']}")
    return 0


def cmd_ablate(args):
    run = _run_config(args)
    train_set = hz.load_split(run.data, "train")
    val_set = hz.load_split(run.data, "val")
    results = hz.run_ablation(run, train_set, val_set)
    table1, table2, raw = hz.ablation_tables(results)
    os.makedirs(run.output, exist_ok=True)
    hz.write_text(os.path.join(run.output, "config.txt"), run.to_text())
    hz.write_text(os.path.join(run.output, "runs.csv"), raw)
    hz.write_text(os.path.join(run.output, "table_modalities.csv"), table1)
    hz.write_text(os.path.join(run.output, "table_fusion.csv"), table2)
    sys.stdout.write(table1 + "\n" + table2)
    return 0


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_gradcheck

    t0 = time.perf_counter()
    results = run_gradcheck(args.seed)
    for r in results:
        print(f"head={r.head} fusion={r.fusion} entries={r.entries} max_rel_error={r.max_rel_error:.3e} "
              f"worst={r.worst_param}")
    worst = max(r.max_rel_error for r in results)
    print(f"max_rel_error={worst:.3e} tolerance={TOLERANCE:g} seconds={time.perf_counter() - t0:.1f}")
    return 0 if worst < TOLERANCE else 1


def cmd_trace(args):
    model, _ = hz.load_checkpoint(args.checkpoint)
    data = hz.load_split(args.data, args.split)
    hz.write_text(args.out, hz.emit_trace(model, data, args.row))
    print(f"wrote trace for row {args.row} to {args.out}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="macx", description="Multimodal compositional attention networks.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--task", choices=TASKS, default="xor3")
    g.add_argument("--instances", type=int, default=2400)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=SyntheticSpec.noise)
    g.add_argument("--train-fraction", type=float, default=2000 / 2400)
    g.add_argument("--split-seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model and write checkpoint and history")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset directory (default: config key data)")
    t.add_argument("--out", help="output directory (default: config key output)")
    t.add_argument("--seed", type=int, help="overrides the first configured seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--batch-size", type=int, default=64)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="modality and fusion ablation tables")
    a.add_argument("--config")
    a.add_argument("--data", help="dataset directory (default: config key data)")
    a.add_argument("--out", help="output directory (default: config key output)")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of all gradients on a tiny model")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("trace", help="attention maps and scores for one instance")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--split", default="val")
    r.add_argument("--row", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_trace)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, IndexError, BundleError, FloatingPointError, RuntimeError) as exc:
        print(f"macx {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
