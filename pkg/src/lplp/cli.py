"""Command line entry point: ``python -m lplp <subcommand>``.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .bagdata import ConfigurationError, DatasetFormatError, load_dataset, save_dataset, synth_gaussian_dataset
from .nets import CheckpointFormatError, load_checkpoint

VALIDATION_ERRORS = (ConfigurationError, DatasetFormatError, CheckpointFormatError, ValueError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lplp", description="Instance classifiers from bag labels and partial class proportions.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset file")
    s.add_argument("--out", required=True)
    s.add_argument("--c", type=int, default=2, help="number of positive classes")
    s.add_argument("--dim", type=int, default=8)
    s.add_argument("--separation", type=float, default=6.0)
    s.add_argument("--counts", type=int, nargs=6, default=[400, 400, 100, 100, 100, 10],
                   metavar=("TRAIN_POS", "TRAIN_NEG", "VAL_POS", "VAL_NEG", "TEST_POS", "TEST_NEG"))
    s.add_argument("--bag-size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train one method on a dataset file")
    t.add_argument("--data", required=True)
    t.add_argument("--method", default="ours")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", help="output directory (default: <data>_<method>_s<seed>)")
    t.add_argument("--aggregation", default="select_on_validation")
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--batch-bags", type=int, default=16)
    t.add_argument("--w-mil", type=float, default=0.01)
    t.add_argument("--patience", type=int, default=30)
    t.add_argument("--max-epochs", type=int, default=1000)
    t.add_argument("--threshold", type=float, default=0.5)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "validation", "test"))
    e.add_argument("--threshold", type=float, default=None)

    x = sub.add_parser("experiment", help="run the methods x seeds grid")
    x.add_argument("--config", help="INI config (default: built-in default grid)")
    x.add_argument("--out", help="root directory for run directories")
    x.add_argument("--seed", type=int, nargs="*", help="override the config's seeds")

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--seed", type=int, default=0)
    return p


def _synth(args):
    ds = synth_gaussian_dataset(args.c, args.dim, args.separation, *args.counts,
                                bag_size=args.bag_size, seed=args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: {len(ds.train)} train, {len(ds.validation)} validation, "
          f"{len(ds.test)} test bags")


def _train(args):
    from .trainer import TrainConfig, train
    data = load_dataset(args.data)
    cfg = TrainConfig(method=args.method, learning_rate=args.lr, batch_bags=args.batch_bags,
                      w_mil=args.w_mil, patience=args.patience, max_epochs=args.max_epochs,
                      aggregation=args.aggregation, inference_threshold=args.threshold, seed=args.seed)
    out = args.out or f"{os.path.splitext(args.data)[0]}_{args.method}_s{args.seed}"
    state = train(cfg, data, out)
    print(f"{args.method}: epochs={state.epoch} best_epoch={state.best_epoch} "
          f"best_val_loss={state.best_val_loss:.6g} aggregation={state.aggregation}")
    print(f"checkpoint: {os.path.join(out, 'checkpoint.txt')}")
    print(f"metrics: {os.path.join(out, 'metrics.txt')}")


def _eval(args):
    from .evaluation import evaluate
    ck = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    if ck.model.input_dim != data.feature_dim or ck.model.num_classes != data.num_positive_classes:
        raise ConfigurationError("checkpoint and dataset dimensions disagree")
    thr = args.threshold if args.threshold is not None else float(ck.meta.get("threshold", 0.5))
    rep = evaluate(ck.model, data.split(args.split), thr, ck.meta.get("method", ""))
    print(f"accuracy {100 * rep.accuracy:.2f}")
    print(f"miou {100 * rep.miou:.2f}")
    print(f"binary_accuracy {100 * rep.binary_accuracy:.2f}")
    print("per_class_iou " + " ".join(f"{100 * v:.2f}" for v in rep.per_class_iou))


def _experiment(args):
    from .experiment import DEFAULT_CONFIG, load_config, parse_config, run_experiment
    cfg = load_config(args.config) if args.config else parse_config(DEFAULT_CONFIG)
    if args.seed:
        cfg.seeds = list(args.seed)
    summary = run_experiment(cfg, args.out)
    print(summary.table())
    print(f"summary: {os.path.join(summary.run_dir, 'summary.tsv')}")
    if summary.failures:
        return 2


def _gradcheck(args):
    from .gradcheck import run_suite
    ok, worst, results = run_suite(args.seed)
    for r in results:
        print(f"{r.name:<24} {r.report}")
    print(f"worst relative error {worst:.3e}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"synth": _synth, "train": _train, "eval": _eval,
               "experiment": _experiment, "gradcheck": _gradcheck}[args.command]
    try:
        return handler(args) or 0
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
