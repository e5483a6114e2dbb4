# -*- coding: utf-8 -*-

"""
Confusion matrix bookkeeping and the per-class IoU / mIoU report used to score
night segmentation
"""

from collections import OrderedDict

import numpy as np
import torch

from ._errors import DimensionError, EmptyEvaluationError
from ._imgcore import IGNORE_ID
from .enhancement import enhance
from .segmentation import seg_forward


class ConfusionMatrix(object):
    """
    C x C pixel counts, rows are ground truth classes, columns predicted classes.
    Matrices of the same size are merged with `+`.
    """

    def __init__(self, num_classes, counts=None):
        """
        :param num_classes: (int) number of classes C
        :param counts: (numpy.ndarray) optional initial (C, C) integer counts
        """
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (self.num_classes, self.num_classes):
            msg = "counts shape {} does not match {} classes".format(counts.shape, self.num_classes)
            raise DimensionError(msg)
        self.counts = counts

    def __add__(self, other):
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        if other.num_classes != self.num_classes:
            msg = "cannot merge confusion matrices of {} and {} classes".format(self.num_classes, other.num_classes)
            raise DimensionError(msg)
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other):
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.counts, other.counts)

    def accumulate(self, pred, gt):
        """
        Count every pixel whose ground truth is not the ignore id
        :param pred: predicted label map (numpy array or torch tensor)
        :param gt: ground truth label map of the same shape
        :return: self
        """
        pred, gt = _as_numpy(pred), _as_numpy(gt)
        if pred.shape != gt.shape:
            raise DimensionError("prediction shape {} differs from ground truth {}".format(pred.shape, gt.shape))
        valid = gt != IGNORE_ID
        gt, pred = gt[valid].astype(np.int64), pred[valid].astype(np.int64)
        if gt.size == 0:
            return self
        in_range = (gt >= 0) & (gt < self.num_classes) & (pred >= 0) & (pred < self.num_classes)
        if not np.all(in_range):
            raise DimensionError("label ids outside [0, {})".format(self.num_classes))
        flat = np.bincount(gt * self.num_classes + pred, minlength=self.num_classes ** 2)
        self.counts += flat.reshape(self.num_classes, self.num_classes)
        return self

    @property
    def total(self):
        return int(self.counts.sum())

    def iou(self):
        """
        Per-class IoU; NaN for classes absent from both ground truth and prediction
        :return: numpy float array (C,)
        """
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.maximum(union, 1), np.nan)

    def miou(self):
        """
        :return: (per-class IoU array, mean over the defined classes)
        """
        if self.total == 0:
            raise EmptyEvaluationError("confusion matrix contains no evaluated pixel")
        iou = self.iou()
        return iou, float(np.nanmean(iou))

    def pixel_accuracy(self):
        if self.total == 0:
            raise EmptyEvaluationError("confusion matrix contains no evaluated pixel")
        return float(np.trace(self.counts)) / float(self.total)

    def report(self, class_names=None):
        """
        Json-serializable evaluation report. Undefined IoUs are reported as None.
        :param class_names: list of class names (defaults to the class ids)
        :return: OrderedDict
        """
        if class_names is None:
            class_names = [str(i) for i in range(self.num_classes)]
        iou, mean_iou = self.miou()
        per_class = OrderedDict()
        for name, value in zip(class_names, iou):
            per_class[name] = None if np.isnan(value) else float(value)
        return OrderedDict((("per_class_iou", per_class),
                            ("miou", mean_iou),
                            ("pixel_accuracy", self.pixel_accuracy()),
                            ("pixel_count", self.total)))


def _as_numpy(labels):
    if isinstance(labels, torch.Tensor):
        return labels.detach().cpu().numpy()
    return np.asarray(labels)


def accumulate(cm, pred, gt):
    """ Functional form of ConfusionMatrix.accumulate """
    return cm.accumulate(pred, gt)


def miou(cm):
    """ Functional form of ConfusionMatrix.miou """
    return cm.miou()


def predict_labels(seg_net, relight_net, images, relight_enabled=True, batch_size=8):
    """
    Arg-max predictions of the enhanced images, computed without gradients
    :param seg_net: segmentation network
    :param relight_net: relighting network (ignored if relight_enabled is False)
    :param images: (torch.Tensor) image batch (N, 3, H, W)
    :param relight_enabled: (bool) run the images through the relighting network
    :param batch_size: (int) forward pass chunk size
    :return: (torch.Tensor) predicted label map (N, H, W)
    """
    predictions = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunk = images[start:start + batch_size]
            enhanced = enhance(relight_net, chunk)[1] if relight_enabled else chunk
            predictions.append(torch.argmax(seg_forward(seg_net, enhanced), dim=1))
    return torch.cat(predictions, dim=0)


def evaluate_networks(seg_net, relight_net, images, labels, num_classes, relight_enabled=True, batch_size=8):
    """
    Accumulate the confusion matrix of the networks on a labeled image set
    :return: ConfusionMatrix
    """
    cm = ConfusionMatrix(num_classes)
    pred = predict_labels(seg_net, relight_net, images, relight_enabled=relight_enabled, batch_size=batch_size)
    return cm.accumulate(pred, labels)
