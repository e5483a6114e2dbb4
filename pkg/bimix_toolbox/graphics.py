# -*- coding: utf-8 -*-

""" Static png figures of training runs, parameter sweeps and evaluations """

import numpy as np

import cmocean
import matplotlib
matplotlib.use("agg")
import matplotlib.pyplot as plt


class _PngFigure(object):
    """ Shared savefig workflow: build the figure, write it, release it """

    figsize = (8, 5)

    def savefig(self, filename, dpi=150):
        """
        Save the figure as png
        :param filename: (str) target filename (full filepath)
        :param dpi: (int) resolution (dots per inch)
        :return: None
        """
        self._init_figure()
        self._create_figure()
        self.fig.savefig(str(filename), dpi=dpi)
        plt.close(self.fig)

    def _init_figure(self):
        self.fig = plt.figure(figsize=self.figsize, facecolor="white")

    def _create_figure(self):
        raise NotImplementedError()


class LossCurvePlot(_PngFigure):

    figsize = (10, 8)

    def __init__(self, metrics, keys=("total", "l_M", "l_ssl", "l_adv", "l_D", "l_enhance", "l_f2m", "l_m2f"),
                 smooth=25, title=None):
        """
        Loss curves of a training run
        :param metrics: (pandas.DataFrame) one row per step with an `iter` column
        :param keys: loss columns to draw (missing columns are skipped)
        :param smooth: (int) width of the running mean
        :param title: (str) figure title
        """
        self.metrics = metrics
        self.keys = [key for key in keys if key in metrics.columns]
        self.smooth = max(int(smooth), 1)
        self.title = title

    def _create_figure(self):
        n_keys = max(len(self.keys), 1)
        n_cols = 2 if n_keys > 1 else 1
        n_rows = int(np.ceil(n_keys / float(n_cols)))
        axes = self.fig.subplots(n_rows, n_cols, squeeze=False, sharex=True)
        iterations = self.metrics["iter"].values
        for ax, key in zip(axes.ravel(), self.keys):
            values = self.metrics[key]
            ax.plot(iterations, values.values, color="0.75", lw=0.5)
            ax.plot(iterations, values.rolling(self.smooth, min_periods=1).mean().values, color="#003e6e", lw=1.5)
            ax.set_title(key, fontsize=10)
            ax.grid(alpha=0.3)
        for ax in axes.ravel()[len(self.keys):]:
            ax.set_visible(False)
        for ax in axes[-1]:
            ax.set_xlabel("iteration")
        if self.title is not None:
            self.fig.suptitle(self.title)
        self.fig.tight_layout()


class SweepPlot(_PngFigure):

    def __init__(self, sweep, param, baseline_miou=None):
        """
        Night mIoU as a function of a loss weight
        :param sweep: (pandas.DataFrame) columns `value` and `miou`
        :param param: (str) name of the swept weight
        :param baseline_miou: (float) optional reference line
        """
        self.sweep = sweep
        self.param = param
        self.baseline_miou = baseline_miou

    def _create_figure(self):
        ax = self.fig.add_subplot(1, 1, 1)
        values = self.sweep["value"].values.astype(float)
        positions = np.arange(len(values))
        ax.plot(positions, 100.0 * self.sweep["miou"].values, marker="o", color="#00ace5", lw=2)
        ax.set_xticks(positions)
        ax.set_xticklabels(["%g" % v for v in values])
        if self.baseline_miou is not None:
            ax.axhline(100.0 * self.baseline_miou, color="#4b4b4d", ls="--", lw=1, label="pretrain only")
            ax.legend(loc="best")
        ax.set_xlabel(self.param)
        ax.set_ylabel("night mIoU (%)")
        ax.grid(alpha=0.3)
        self.fig.tight_layout()


class ConfusionMatrixPlot(_PngFigure):

    figsize = (7, 6)

    def __init__(self, cm, class_names):
        """
        Row-normalized confusion matrix
        :param cm: evaluation.ConfusionMatrix
        :param class_names: list of class names
        """
        self.cm = cm
        self.class_names = list(class_names)

    def _create_figure(self):
        ax = self.fig.add_subplot(1, 1, 1)
        counts = self.cm.counts.astype(np.float64)
        rows = counts.sum(axis=1, keepdims=True)
        normalized = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
        image = ax.imshow(normalized, cmap=cmocean.cm.ice_r, vmin=0.0, vmax=1.0, interpolation="none")
        ticks = np.arange(len(self.class_names))
        ax.set_xticks(ticks)
        ax.set_yticks(ticks)
        ax.set_xticklabels(self.class_names, rotation=45, ha="right")
        ax.set_yticklabels(self.class_names)
        ax.set_xlabel("prediction")
        ax.set_ylabel("ground truth")
        for i in ticks:
            for j in ticks:
                if normalized[i, j] >= 0.005:
                    color = "white" if normalized[i, j] > 0.5 else "black"
                    ax.text(j, i, "%.2f" % normalized[i, j], ha="center", va="center", fontsize=7, color=color)
        self.fig.colorbar(image, ax=ax, fraction=0.046, pad=0.04)
        self.fig.tight_layout()
