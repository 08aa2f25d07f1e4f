"""Command line front end.

All commands share one workspace directory (--out): gen-data puts the split
containers under <out>/data, pretrain-source writes <out>/source.ckpt, adapt
writes <out>/<method>/ with the ledger CSV, curves SVG and both checkpoints.
Splits are regenerated from (config, seed) when the cache is missing, so any
command can run standalone.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import RunConfig, load_config, save_config
from .detector import load_checkpoint, save_checkpoint
from .evaluation import map50
from .reporting import emit_curves, read_ledger_csv
from .scenes import load_dataset, save_dataset
from .training import adapt, make_datasets, parse_method, pretrain_source

log = logging.getLogger(__name__)
SPLITS = ("source_train", "source_val", "target_train", "target_val")


def _build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _data_dir(out):
    return Path(out) / "data"


def _load_or_build_datasets(cfg, out):
    data_dir = _data_dir(out)
    paths = {s: data_dir / f"{s}.bin" for s in SPLITS}
    if all(p.exists() for p in paths.values()):
        log.info("loading cached splits from %s", data_dir)
        return {s: load_dataset(p) for s, p in paths.items()}
    log.info("generating splits (seed %d)", cfg.seed)
    return make_datasets(cfg)


def cmd_gen_data(args):
    cfg = _build_config(args)
    data_dir = _data_dir(args.out)
    data_dir.mkdir(parents=True, exist_ok=True)
    datasets = make_datasets(cfg)
    for split, ds in datasets.items():
        path = data_dir / f"{split}.bin"
        save_dataset(ds, path)
        log.info("wrote %s (%d images)", path, len(ds))
    save_config(cfg, data_dir / "config.yaml")
    return 0


def cmd_pretrain_source(args):
    cfg = _build_config(args)
    datasets = _load_or_build_datasets(cfg, args.out)
    result = pretrain_source(cfg, datasets, epochs=args.epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "source.ckpt"
    save_checkpoint(result.params, ckpt)
    metrics = {
        "source_val_map50": result.source_val_map,
        "target_val_map50": result.target_val_map,
    }
    (out / "source_metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    print(f"checkpoint: {ckpt}")
    print(f"source val mAP@0.5: {result.source_val_map:.4f}")
    print(f"target val mAP@0.5: {result.target_val_map:.4f}")
    return 0


def cmd_adapt(args):
    cfg = _build_config(args)
    method = parse_method(args.method, ema_interval=cfg.ema_interval)
    datasets = _load_or_build_datasets(cfg, args.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "source.ckpt"
    if not ckpt.exists():
        print(f"missing source checkpoint {ckpt}; run pretrain-source first", file=sys.stderr)
        return 2
    source = load_checkpoint(ckpt)
    result = adapt(
        source,
        method,
        datasets["target_train"].without_labels(),
        datasets["target_val"],
        cfg,
        epochs=args.epochs,
        eval_every=args.eval_every,
    )
    run_dir = Path(args.out) / args.method.replace("(", "_").replace(")", "")
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.teacher, run_dir / "teacher.ckpt")
    save_checkpoint(result.student, run_dir / "student.ckpt")
    emitted = emit_curves(result.ledger, run_dir, basename="run")
    final = result.ledger.final
    print(f"run dir: {run_dir}")
    print(f"final teacher mAP@0.5: {final.teacher_map50:.4f}")
    print(f"final student mAP@0.5: {final.student_map50:.4f}")
    print(
        f"teacher updates: {final.teacher_updates}  student retrains: {final.student_retrains}"
    )
    print(f"ledger: {emitted.csv_path}")
    return 0


def cmd_eval(args):
    cfg = _build_config(args)
    datasets = _load_or_build_datasets(cfg, args.out)
    if args.split not in SPLITS:
        print(f"unknown split {args.split}", file=sys.stderr)
        return 2
    params = load_checkpoint(args.checkpoint)
    result = map50(params, datasets[args.split], cfg.eval_score_floor)
    print(f"mAP@0.5 on {args.split}: {result.mean:.4f}")
    for cls, ap in sorted(result.per_class.items()):
        print(f"  class {cls}: AP {ap:.4f}")
    return 0


def cmd_plot(args):
    ledger = read_ledger_csv(args.csv)
    out_dir = Path(args.out) if args.out else Path(args.csv).parent
    emitted = emit_curves(ledger, out_dir, basename=Path(args.csv).stem)
    print(f"figure: {emitted.figure_path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sfodlab",
        description="Source-free detector adaptation laboratory on synthetic shape scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="YAML run config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", required=out_required, help="workspace directory")

    p = sub.add_parser("gen-data", help="generate and cache the four splits")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain-source", help="supervised training on clean scenes")
    common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=cmd_pretrain_source)

    p = sub.add_parser("adapt", help="self-train on unlabeled target images")
    common(p)
    p.add_argument("--method", required=True, help="one of source_only, mt_fixed(m), mt_mic, mt_mic_his, mt_mic_dru, dru_full")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--checkpoint", default=None, help="source checkpoint (default <out>/source.ckpt)")
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("eval", help="mAP of a checkpoint on one split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="target_val")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("plot", help="re-render curves from a ledger CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", default=None, help="figure directory (default: beside the CSV)")
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
