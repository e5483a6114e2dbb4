# -*- coding: utf-8 -*-

"""
Command line interface of the toolbox (`bimix`)

    bimix gen-data  --out data/synth
    bimix pretrain  --data data/synth --out runs/pretrain
    bimix adapt     --data data/synth --checkpoint runs/pretrain/checkpoint --ablate bimix
    bimix eval      --data data/synth --checkpoint runs/adapt/checkpoint --dump-preds
    bimix gradcheck --loss tv
    bimix sweep     --data data/synth --checkpoint runs/pretrain/checkpoint --param mu1

Exit codes: 0 success, 2 usage error or refused overwrite, 3 missing inputs,
4 gradient check failure.
"""

import sys
import argparse
from pathlib import Path
from datetime import datetime

import pandas as pd
from loguru import logger

from ._errors import OverwriteError, DataError, CheckpointError, PairingError
from ._trainer import BimixCfg, ABLATION_MODES
from .gradcheck import GRADCHECK_LOSSES, DEFAULT_SEEDS, run_gradchecks
from .synthdata import DatasetCounts
from . import scripts

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_GRADCHECK = 4

COMMANDS = ("gen-data", "pretrain", "adapt", "eval", "gradcheck", "sweep")


def _global_options(defaults):
    """
    Options accepted before and after the sub-command. The sub-command parsers
    suppress the defaults so they do not overwrite values given earlier.
    """
    parser = argparse.ArgumentParser(add_help=False)
    default = (lambda value: value) if defaults else (lambda value: argparse.SUPPRESS)
    parser.add_argument("--config", default=default(None), help="flat yaml configuration file")
    parser.add_argument("--seed", type=int, default=default(None), help="experiment seed")
    parser.add_argument("--out", default=default(None), help="output directory")
    parser.add_argument("--resume", action="store_true", default=default(False),
                        help="continue a run in an existing output directory")
    parser.add_argument("--verbose", action="store_true", default=default(False), help="debug logging")
    return parser


def get_parser():
    parser = argparse.ArgumentParser(prog="bimix", description=__doc__.split("\n")[1].strip(),
                                     parents=[_global_options(True)])
    subparsers = parser.add_subparsers(dest="command", required=True)
    common = [_global_options(False)]

    gen = subparsers.add_parser("gen-data", parents=common, help="generate the synthetic benchmark")
    gen.add_argument("--source-n", type=int, default=400)
    gen.add_argument("--pairs-n", type=int, default=200)
    gen.add_argument("--test-n", type=int, default=50)
    gen.add_argument("--val-n", type=int, default=25)
    gen.add_argument("--image-size", type=int, default=None)
    gen.add_argument("--force", action="store_true", help="replace an existing dataset")
    gen.add_argument("--workers", type=int, default=1)

    pre = subparsers.add_parser("pretrain", parents=common, help="source-only pretraining")
    pre.add_argument("--data", required=True, help="dataset root")
    pre.add_argument("--iters", type=int, default=None, help="override pretrain_iters")

    ada = subparsers.add_parser("adapt", parents=common, help="day/night adaptation")
    ada.add_argument("--data", required=True, help="dataset root")
    ada.add_argument("--checkpoint", default=None, help="pretrain checkpoint directory")
    ada.add_argument("--ablate", choices=ABLATION_MODES, default=None, help="mixing mode")
    ada.add_argument("--no-relight", action="store_true", help="bypass the relighting network")
    ada.add_argument("--iters", type=int, default=None, help="override max_iters")
    ada.add_argument("--allow-digest-mismatch", action="store_true",
                     help="use a checkpoint trained with a different configuration")

    eva = subparsers.add_parser("eval", parents=common, help="night segmentation report")
    eva.add_argument("--data", required=True, help="dataset root")
    eva.add_argument("--checkpoint", required=True, help="checkpoint directory")
    eva.add_argument("--split", choices=("test", "val"), default="test")
    eva.add_argument("--no-relight", action="store_true", help="bypass the relighting network")
    eva.add_argument("--dump-preds", action="store_true", help="write colorized prediction pngs")
    eva.add_argument("--dump-relit", action="store_true", help="write relighted and enhanced pngs")

    grad = subparsers.add_parser("gradcheck", parents=common, help="finite difference gradient check")
    grad.add_argument("--loss", action="append", choices=GRADCHECK_LOSSES, default=None,
                      help="restrict to a loss (repeatable)")
    grad.add_argument("--seeds", type=int, default=len(DEFAULT_SEEDS), help="number of instance seeds")

    swp = subparsers.add_parser("sweep", parents=common, help="loss weight sweep")
    swp.add_argument("--data", required=True, help="dataset root")
    swp.add_argument("--checkpoint", required=True, help="pretrain checkpoint directory")
    swp.add_argument("--param", choices=sorted(scripts.SWEEP_MODES), required=True)
    swp.add_argument("--values", type=float, nargs="+", default=list(scripts.DEFAULT_SWEEP_VALUES))
    swp.add_argument("--iters", type=int, default=None, help="override max_iters")
    swp.add_argument("--workers", type=int, default=1)

    return parser


def get_cfg(args):
    """
    Effective configuration: config file (or the desk preset), then command line
    overrides
    :return: BimixCfg
    """
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "ablate", None) is not None:
        overrides["mode"] = args.ablate
    if getattr(args, "no_relight", False):
        overrides["relight_enabled"] = False
    if getattr(args, "iters", None) is not None:
        key = "pretrain_iters" if args.command == "pretrain" else "max_iters"
        overrides[key] = args.iters

    if args.config is not None:
        if not Path(args.config).is_file():
            raise DataError("Config file does not exist: %s" % args.config)
        return BimixCfg.from_cfg(args.config, **overrides)
    return BimixCfg.preset("desk", **overrides)


def _default_out(args):
    if args.command == "gen-data":
        return Path("data") / "synth"
    stamp = datetime.now().strftime("%Y%m%dT%H%M%S")
    return Path("runs") / ("%s_%s" % (args.command, stamp))


def _setup_logging(verbose):
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else "INFO")


def cmd_gen_data(args):
    seed = args.seed if args.seed is not None else 0
    image_size = args.image_size if args.image_size is not None else BimixCfg.preset("desk").image_size
    counts = DatasetCounts(source=args.source_n, pairs=args.pairs_n, test=args.test_n, val=args.val_n)
    manifest = scripts.gen_data(args.out, counts, seed=seed, image_size=image_size, force=args.force,
                                workers=args.workers)
    print(manifest.digest)
    return EXIT_OK


def _run_dir(args, cfg, flags):
    out_dir = scripts.prepare_run_dir(args.out, resume=args.resume)
    scripts.RunDescriptor(args.command, args.config, cfg.seed, out_dir, flags=flags,
                          config_digest=cfg.digest).write()
    return out_dir


def cmd_pretrain(args):
    cfg = get_cfg(args)
    out_dir = _run_dir(args, cfg, dict(data=args.data))
    scripts.run_pretrain(cfg, args.data, out_dir, resume=args.resume)
    return EXIT_OK


def cmd_adapt(args):
    cfg = get_cfg(args)
    flags = dict(data=args.data, checkpoint=args.checkpoint, ablate=cfg.mode, relight=cfg.relight_enabled)
    out_dir = _run_dir(args, cfg, flags)
    scripts.run_adapt(cfg, args.data, args.checkpoint, out_dir, resume=args.resume,
                      allow_digest_mismatch=args.allow_digest_mismatch)
    return EXIT_OK


def cmd_eval(args):
    cfg = get_cfg(args)
    flags = dict(data=args.data, checkpoint=args.checkpoint, split=args.split, dump_preds=args.dump_preds,
                 dump_relit=args.dump_relit)
    out_dir = _run_dir(args, cfg, flags)
    report = scripts.run_eval(cfg, args.data, args.checkpoint, out_dir, split=args.split,
                              dump_preds=args.dump_preds, dump_relit=args.dump_relit)
    print("mIoU %.4f" % report["miou"])
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_gradchecks(names=args.loss, seeds=range(args.seeds))
    table = pd.DataFrame(results, columns=["loss", "seed", "rel_err", "passed"])
    print(table.to_string(index=False, float_format=lambda v: "%.3e" % v))
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        table.to_csv(str(Path(args.out) / "gradcheck.csv"), index=False)
    n_failed = int((~table["passed"]).sum())
    if n_failed > 0:
        logger.error("%d of %d gradient checks failed" % (n_failed, len(table)))
        return EXIT_GRADCHECK
    logger.info("All %d gradient checks passed" % len(table))
    return EXIT_OK


def cmd_sweep(args):
    cfg = get_cfg(args)
    flags = dict(data=args.data, checkpoint=args.checkpoint, param=args.param, values=args.values)
    out_dir = _run_dir(args, cfg, flags)
    scripts.run_sweep(cfg, args.data, args.checkpoint, out_dir, args.param, values=args.values,
                      workers=args.workers)
    return EXIT_OK


COMMAND_FUNCS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "adapt": cmd_adapt, "eval": cmd_eval,
                 "gradcheck": cmd_gradcheck, "sweep": cmd_sweep}


def main(argv=None):
    """
    Parse the command line and run a sub-command
    :param argv: list of arguments (sys.argv[1:] if None)
    :return: (int) exit code
    """
    parser = get_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    _setup_logging(args.verbose)
    if args.out is None and args.command != "gradcheck":
        args.out = str(_default_out(args))

    try:
        return COMMAND_FUNCS[args.command](args)
    except OverwriteError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except (DataError, CheckpointError, PairingError, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_MISSING_INPUT
    except ValueError as e:
        logger.error(str(e))
        return EXIT_USAGE
