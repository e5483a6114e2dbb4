# -*- coding: utf-8 -*-

"""
Module that contains functions for standardized training and evaluation workflows.
These are meant to be called by the command line interface.
"""

import json
import multiprocessing
from pathlib import Path
from datetime import datetime
from collections import OrderedDict

import numpy as np
import pandas as pd
from loguru import logger

from . import __version__
from ._errors import OverwriteError, CheckpointError, DataError
from ._utils import get_cls
from ._checkpoint import Checkpoint
from ._trainer import BimixTrainer, JsonLinesWriter, pretrain, adapt
from .evaluation import ConfusionMatrix, predict_labels
from .enhancement import enhance
from .graphics import LossCurvePlot, SweepPlot, ConfusionMatrixPlot
from .synthdata import CLASS_NAMES, write_dataset, write_png, to_uint8, colorize_labels

# Swept weight -> ablation mode that keeps only the corresponding term
SWEEP_MODES = dict(mu1="f2m", mu2="m2f", mu3="bimix")
DEFAULT_SWEEP_VALUES = (0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)


class RunDescriptor(object):

    def __init__(self, command, config_path, seed, out_dir, flags=None, config_digest=None):
        """
        Provenance record of one command invocation
        :param command: (str) sub-command name
        :param config_path: (str) config file given on the command line (None: preset)
        :param seed: (int) experiment seed
        :param out_dir: (str, pathlib.Path) run directory
        :param flags: (dict) mode flags of the command
        :param config_digest: (str) digest of the effective configuration
        """
        self.command = command
        self.config_path = None if config_path is None else str(config_path)
        self.seed = seed
        self.out_dir = Path(out_dir)
        self.flags = dict(flags) if flags is not None else {}
        self.config_digest = config_digest

    def to_dict(self):
        return OrderedDict((("command", self.command), ("config_path", self.config_path), ("seed", self.seed),
                            ("out_dir", str(self.out_dir)), ("flags", self.flags),
                            ("config_digest", self.config_digest), ("version", __version__),
                            ("created", datetime.now().isoformat(timespec="seconds"))))

    def write(self):
        with open(str(self.out_dir / "run.json"), "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def prepare_run_dir(out_dir, resume=False):
    """
    Create the run directory and attach a log file sink. An existing non-empty
    directory is only accepted when resuming.
    :return: pathlib.Path
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not resume:
        raise OverwriteError("Run directory exists: %s (use --resume or a fresh --out)" % out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.add(str(out_dir / "run.log"), level="DEBUG")
    return out_dir


def get_loader(cfg, data_root):
    """ Instance of the dataset loader class named in the configuration """
    loader_cls = get_cls("bimix_toolbox._dataset", cfg.loader, relaxed=False)
    return loader_cls(data_root)


def load_checkpoint(path):
    path = Path(path)
    if not path.is_dir():
        raise CheckpointError("Checkpoint does not exist: %s" % path)
    logger.info("Load checkpoint: %s" % path)
    return Checkpoint.load(path)


def _truncate_jsonl(filepath, iteration):
    """ Drop metric lines at or after `iteration` (left over from an interrupted run) """
    filepath = Path(filepath)
    if not filepath.is_file():
        return
    with open(str(filepath), "r") as f:
        lines = [line for line in f if line.strip() and json.loads(line)["iter"] < iteration]
    with open(str(filepath), "w") as f:
        f.writelines(lines)


def plot_loss_curves(metrics_path, png_path, title=None):
    metrics_path = Path(metrics_path)
    if not metrics_path.is_file() or metrics_path.stat().st_size == 0:
        logger.warning("No metrics to plot in %s" % metrics_path)
        return
    metrics = pd.read_json(str(metrics_path), lines=True)
    LossCurvePlot(metrics, title=title).savefig(str(png_path))


def gen_data(out_dir, counts, seed=0, image_size=96, force=False, workers=1):
    """
    Generate the synthetic benchmark
    :return: synthdata.DatasetManifest
    """
    return write_dataset(out_dir, counts=counts, seed=seed, image_size=image_size, force=force,
                         use_multiprocessing=workers > 1, mp_reserve_cpus=max(multiprocessing.cpu_count() - workers, 0),
                         progress=True)


def run_pretrain(cfg, data_root, out_dir, resume=False):
    """
    Source-only pretraining. Writes `checkpoint/`, the periodic `last/`,
    `metrics.jsonl`, `config.yaml` and `loss_curves.png` to the run directory.
    :return: Checkpoint
    """
    out_dir = Path(out_dir)
    source = get_loader(cfg, data_root).source()
    trainer = BimixTrainer(cfg)

    checkpoint, metrics_path = None, out_dir / "metrics.jsonl"
    if resume:
        for name in ("checkpoint", "last"):
            if (out_dir / name).is_dir():
                checkpoint = load_checkpoint(out_dir / name)
                _truncate_jsonl(metrics_path, checkpoint.iteration)
                break

    cfg.save(out_dir / "config.yaml")
    logger.info("Pretrain on %d source images for %d iterations" % (len(source), cfg.pretrain_iters))
    with JsonLinesWriter(metrics_path, append=checkpoint is not None) as writer:
        result = pretrain(trainer, source, checkpoint=checkpoint, metrics_writer=writer, checkpoint_dir=out_dir,
                          progress=True)
    result.save(out_dir / "checkpoint")
    plot_loss_curves(metrics_path, out_dir / "loss_curves.png", title="pretrain")
    return result


def run_adapt(cfg, data_root, checkpoint_path, out_dir, resume=False, allow_digest_mismatch=False,
              progress=True):
    """
    Adaptation from a pretrain checkpoint, or continuation from the last periodic
    checkpoint of the run directory with `resume`. Writes `checkpoint/`, `last/`,
    `best/`, `metrics.jsonl`, `eval.jsonl`, `config.yaml` and `loss_curves.png`.
    :return: Checkpoint
    """
    out_dir = Path(out_dir)
    loader = get_loader(cfg, data_root)
    source, target = loader.source(), loader.pairs()
    val = loader.evaluation("val") if loader.has_split("val") else None
    if val is None:
        logger.warning("No validation split in %s, evaluation snapshots disabled" % data_root)

    metrics_path, eval_path = out_dir / "metrics.jsonl", out_dir / "eval.jsonl"
    resuming = resume and (out_dir / "last").is_dir()
    if resuming:
        checkpoint = load_checkpoint(out_dir / "last")
        _truncate_jsonl(metrics_path, checkpoint.iteration)
        _truncate_jsonl(eval_path, checkpoint.iteration + 1)
    else:
        if checkpoint_path is None:
            raise CheckpointError("adaptation needs a pretrain checkpoint")
        checkpoint = load_checkpoint(checkpoint_path)

    cfg.save(out_dir / "config.yaml")
    trainer = BimixTrainer(cfg)
    logger.info("Adapt (mode %s, relight %s) for %d iterations" % (cfg.mode, cfg.relight_enabled, cfg.max_iters))
    with JsonLinesWriter(metrics_path, append=resuming) as metrics_writer, \
            JsonLinesWriter(eval_path, append=resuming) as eval_writer:
        result = adapt(trainer, source, target, checkpoint=checkpoint, val=val, metrics_writer=metrics_writer,
                       eval_writer=eval_writer, checkpoint_dir=out_dir, allow_digest_mismatch=allow_digest_mismatch,
                       progress=progress)
    result.save(out_dir / "checkpoint")
    plot_loss_curves(metrics_path, out_dir / "loss_curves.png", title="adapt (%s)" % cfg.mode)
    return result


def run_eval(cfg, data_root, checkpoint_path, out_dir, split="test", dump_preds=False, dump_relit=False):
    """
    Night segmentation report of a checkpoint. Writes `report.json`,
    `confusion_matrix.png` and optionally `preds/` and `relit/` pngs.
    :return: report (OrderedDict)
    """
    out_dir = Path(out_dir)
    data = get_loader(cfg, data_root).evaluation(split)
    checkpoint = load_checkpoint(checkpoint_path)
    if checkpoint.model_digest != cfg.model_digest:
        logger.warning("Checkpoint was trained with a different model configuration")

    trainer = BimixTrainer(cfg)
    checkpoint.apply_to(trainer, load_optimizers=False)
    relight_net, seg_net = trainer.frozen_copy()

    pred = predict_labels(seg_net, relight_net, data.images, relight_enabled=cfg.relight_enabled)
    cm = ConfusionMatrix(cfg.num_classes).accumulate(pred, data.labels)
    report = cm.report(class_names=CLASS_NAMES[:cfg.num_classes])
    report["split"] = split
    report["checkpoint"] = str(checkpoint_path)
    report["iteration"] = checkpoint.iteration

    with open(str(out_dir / "report.json"), "w") as f:
        json.dump(report, f, indent=2)
    ConfusionMatrixPlot(cm, CLASS_NAMES[:cfg.num_classes]).savefig(str(out_dir / "confusion_matrix.png"))
    logger.info("%s mIoU: %.4f (pixel accuracy %.4f, %d pixels)" % (
        split, report["miou"], report["pixel_accuracy"], report["pixel_count"]))

    if dump_preds:
        for name, labels in zip(data.names, pred.numpy()):
            write_png(out_dir / "preds" / (name + ".png"), colorize_labels(labels))
        logger.info("Wrote %d prediction pngs" % len(data.names))

    if dump_relit and not cfg.relight_enabled:
        logger.warning("Relighting is disabled in this configuration, no relighted images written")
    elif dump_relit:
        for i, name in enumerate(data.names):
            residual, enhanced = enhance(relight_net, data.images[i:i + 1])
            write_png(out_dir / "relit" / (name + "_residual.png"),
                      to_uint8(residual[0].permute(1, 2, 0).numpy()))
            write_png(out_dir / "relit" / (name + "_enhanced.png"),
                      to_uint8(enhanced[0].permute(1, 2, 0).numpy()))
        logger.info("Wrote %d relighted image pairs" % len(data.names))

    return report


def sweep_point(cfg, param, value, data_root, checkpoint_path, out_dir):
    """
    Adapt and evaluate one grid value of a weight sweep
    :return: OrderedDict {value, miou, pixel_accuracy}
    """
    point_cfg = cfg.replace(mode=SWEEP_MODES[param], **{param: float(value)})
    point_dir = Path(out_dir) / ("%s_%g" % (param, value))
    point_dir.mkdir(parents=True, exist_ok=True)
    logger.info("Sweep point %s=%g (mode %s)" % (param, value, point_cfg.mode))
    run_adapt(point_cfg, data_root, checkpoint_path, point_dir, progress=False)
    report = run_eval(point_cfg, data_root, point_dir / "checkpoint", point_dir)
    return OrderedDict((("value", float(value)), ("miou", report["miou"]),
                        ("pixel_accuracy", report["pixel_accuracy"])))


def run_sweep(cfg, data_root, checkpoint_path, out_dir, param, values=DEFAULT_SWEEP_VALUES, workers=1,
              mp_reserve_cpus=0):
    """
    Grid over one loss weight. Sweeping mu1 keeps only the translation ->
    segmentation branch, sweeping mu2 only the segmentation -> translation branch.
    Writes `sweep.csv` and `sweep.png`.
    :return: pandas.DataFrame with one row per value
    """
    if param not in SWEEP_MODES:
        raise ValueError("Unknown sweep parameter: %s (known: %s)" % (param, ", ".join(SWEEP_MODES)))
    out_dir = Path(out_dir)
    if checkpoint_path is None or not Path(checkpoint_path).is_dir():
        raise CheckpointError("Sweep needs a pretrain checkpoint: %s" % checkpoint_path)
    if len(values) == 0:
        raise DataError("Empty sweep grid")

    use_multiprocessing = workers > 1
    if use_multiprocessing:
        n_processes = min(workers, multiprocessing.cpu_count() - mp_reserve_cpus)
        n_processes = n_processes if n_processes > 1 else 1
        logger.info("Use multi-processing with {} workers".format(n_processes))
        process_pool = multiprocessing.Pool(n_processes)
        results = [process_pool.apply_async(sweep_point, args=(cfg, param, value, data_root, checkpoint_path,
                                                               out_dir))
                   for value in values]
        rows = [result.get() for result in results]
        process_pool.close()
        process_pool.join()
    else:
        rows = [sweep_point(cfg, param, value, data_root, checkpoint_path, out_dir) for value in values]

    sweep = pd.DataFrame(rows, columns=["value", "miou", "pixel_accuracy"])
    sweep.insert(0, "param", param)
    sweep.to_csv(str(out_dir / "sweep.csv"), index=False)

    baseline_dir = out_dir / "pretrain_only"
    baseline_dir.mkdir(parents=True, exist_ok=True)
    baseline = run_eval(cfg, data_root, checkpoint_path, baseline_dir)
    SweepPlot(sweep, param, baseline_miou=baseline["miou"]).savefig(str(out_dir / "sweep.png"))

    best = sweep.iloc[int(np.argmax(sweep["miou"].values))]
    logger.info("Best %s: %g (mIoU %.4f)" % (param, best["value"], best["miou"]))
    return sweep
