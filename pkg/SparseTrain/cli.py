import os
import sys
import argparse
import logging
from typing import List, Optional

from tools.logger import get_logger

from .config import Config, RunConfig, load_config, load_preset
from .core import DivergenceError, TicketSpec, Trainer
from .model import NonFiniteError
from .utils import latest_checkpoint
from .utils.ckpt import CheckpointError

logger = get_logger("SparseTrain")


def _add_run_flags(p: argparse.ArgumentParser):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", type=str, help="run config JSON file")
    src.add_argument("--preset", type=str, default="lenet300_mnist", help="bundled preset name")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", type=str)
    p.add_argument("--sparsity", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--data-dir", type=str)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsetrain",
        description="Train sparse networks with dynamic parameter reallocation and its baselines",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--log-file", type=str, default=None, help="also append uncolored log records to this file")
    parser.add_argument("--out-dir", type=str, default=Config().path.run_root, help="root of run directories")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configured run")
    _add_run_flags(p)
    p.add_argument("--resume", type=str, help="checkpoint, or run directory whose newest checkpoint to continue from")

    p = sub.add_parser("compress", help="dense training followed by gradual magnitude pruning")
    _add_run_flags(p)

    p = sub.add_parser("ticket", help="retrain the final mask of a finished run")
    p.add_argument("source", type=str, help="run directory or name under --out-dir")
    p.add_argument("--init", choices=("original_snapshot", "fresh_random"), default="original_snapshot")
    p.add_argument("--multiplier", type=int, default=2, help="epochs relative to the source run")
    p.add_argument("--name", type=str, default="")

    p = sub.add_parser("earlystop", help="stop reallocation at several epochs, total epochs fixed")
    _add_run_flags(p)
    p.add_argument("--stops", type=int, nargs="+", required=True)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("overhead", help="per-epoch wall time relative to static sparse")
    _add_run_flags(p)
    p.add_argument("--overhead-epochs", type=int, default=10)
    p.add_argument("--methods", type=str, nargs="+", default=["dynamic_sparse", "set", "deepr"])

    p = sub.add_parser("report", help="tables and figures over finished runs")
    p.add_argument("runs", type=str, nargs="+", help="run directories or names under --out-dir")
    p.add_argument("--report-dir", type=str, default="report")

    p = sub.add_parser("verify", help="run the invariant and oracle suites")
    p.add_argument("--suite", type=str, nargs="*", help="suite names, all when omitted")
    return parser


def run_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else load_preset(args.preset)
    if args.method is not None:
        cfg = cfg.with_method(args.method)
    if args.epochs is not None:
        cfg = cfg.with_epochs(args.epochs)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.sparsity is not None:
        cfg.sparsity = args.sparsity
        if cfg.compression is not None:
            cfg.compression.target = args.sparsity
    if args.data_dir is not None:
        cfg.data.dir = args.data_dir
    return cfg.validate()


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logger.setLevel(logging.DEBUG)
    if args.log_file:
        get_logger("SparseTrain", logger.level, log_file=args.log_file)

    if args.command == "verify":
        from .verify import run_suites

        results = run_suites(args.suite)
        return 0 if all(r.passed for r in results) else 1

    trainer = Trainer(logger)
    try:
        if args.command == "train":
            resume = args.resume
            if resume and os.path.isdir(resume):
                resume = latest_checkpoint(resume)
                if resume is None:
                    raise FileNotFoundError(f"no checkpoint to resume in {args.resume}")
            run = trainer.train(run_config(args), args.out_dir, resume=resume)
            logger.info("test accuracy %.4f, run saved in %s", run.summary["test_acc"], run.run_dir)
        elif args.command == "compress":
            run = trainer.compress(run_config(args), args.out_dir)
            logger.info("test accuracy %.4f, run saved in %s", run.summary["test_acc"], run.run_dir)
        elif args.command == "ticket":
            source = args.source if os.path.isdir(args.source) else os.path.join(args.out_dir, args.source)
            ts = TicketSpec(source, init=args.init, epochs_multiplier=args.multiplier, name=args.name)
            run = trainer.run_ticket(ts, args.out_dir)
            logger.info("ticket test accuracy %.4f, run saved in %s", run.summary["test_acc"], run.run_dir)
        elif args.command == "earlystop":
            for row in trainer.run_earlystop_sweep(run_config(args), args.stops, args.out_dir, args.workers):
                logger.info("stop epoch %s: test accuracy %.4f", row["stop_epoch"], row["test_acc"])
        elif args.command == "overhead":
            trainer.measure_overhead(run_config(args), args.overhead_epochs, args.methods, args.out_dir)
        elif args.command == "report":
            for name, path in trainer.report(args.runs, args.report_dir, args.out_dir).items():
                logger.info("%s: %s", name, path)
    except (ValueError, FileNotFoundError, CheckpointError) as e:
        logger.error("%s", e)
        return 2
    except (DivergenceError, NonFiniteError) as e:
        logger.error("training diverged: %s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
