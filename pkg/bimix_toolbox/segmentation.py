# -*- coding: utf-8 -*-

"""
The segmentation network M and its losses: the supervised cross-entropy on
labeled (or mixed) samples and the focal self-supervised loss that uses the day
prediction as pseudo-label for the paired night prediction.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._imgcore import argmax_confidence, one_hot, check_same_shape
from ._utils import init_parameters

# log-safety clamp, applied inside the log terms only
LOG_EPS = 1e-8


class SegNet(nn.Module):
    """
    Four conv blocks (two of them stride 2), a 1x1 classifier and a bilinear
    upsampling of the logits back to the input size
    """

    def __init__(self, num_classes, rng=None):
        """
        :param num_classes: (int) number of classes C
        :param rng: (numpy.random.Generator) initialization stream (torch default init if None)
        """
        super(SegNet, self).__init__()
        self.num_classes = int(num_classes)
        self.block1 = nn.Conv2d(3, 16, kernel_size=3, stride=1, padding=1)
        self.block2 = nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1)
        self.block3 = nn.Conv2d(32, 64, kernel_size=3, stride=2, padding=1)
        self.block4 = nn.Conv2d(64, 64, kernel_size=3, stride=1, padding=1)
        self.classifier = nn.Conv2d(64, self.num_classes, kernel_size=1)
        if rng is not None:
            init_parameters(self, rng)

    def forward(self, x):
        """ Return the logits (N, C, H, W) """
        height, width = x.shape[-2:]
        h = F.relu(self.block1(x))
        h = F.relu(self.block2(h))
        h = F.relu(self.block3(h))
        h = F.relu(self.block4(h))
        logits = self.classifier(h)
        return F.interpolate(logits, size=(height, width), mode="bilinear", align_corners=False)


def seg_forward(net, enhanced):
    """
    Class probabilities of an enhanced image batch
    :param net: segmentation network returning logits
    :param enhanced: (torch.Tensor) I_en (N, 3, H, W)
    :return: (torch.Tensor) prob map (N, C, H, W)
    """
    return F.softmax(net(enhanced), dim=1)


def loss_ce(p, y):
    """
    Cross-entropy normalized by pixel count times class count; ignored pixels
    contribute zero but are counted in N
    :param p: (torch.Tensor) prob map (N, C, H, W)
    :param y: (torch.Tensor) label map (N, H, W)
    :return: scalar tensor
    """
    n_classes = p.shape[1]
    check_same_shape(p[:, 0], y, "loss_ce")
    target = one_hot(y, n_classes, dtype=p.dtype)
    n_pixels = float(y.numel())
    return -torch.sum(target * torch.log(torch.clamp(p, min=LOG_EPS))) / (n_pixels * n_classes)


def loss_mixed_ce(p_mixed, y_mixed):
    """
    Cross-entropy of the prediction on the mixed image against the mixed label.
    The mixed label is integer valued and carries no gradient.
    :param p_mixed: (torch.Tensor) prob map of the enhanced mixed image
    :param y_mixed: (torch.Tensor) mixed label map
    :return: scalar tensor
    """
    return loss_ce(p_mixed, y_mixed.detach())


def focal_weight(p_day, gamma):
    """ Per-pixel weight (1 - p_d)^gamma """
    return (1.0 - p_day) ** gamma


def loss_focal_ssl(p_day, p_night, gamma=1.0):
    """
    Focal self-supervised loss: the day prediction gives the pseudo class c* and its
    confidence p_d, the night prediction is scored at c*
    :param p_day: (torch.Tensor) day prob map (N, C, H, W), treated as constant
    :param p_night: (torch.Tensor) night prob map (N, C, H, W)
    :param gamma: focusing exponent
    :return: scalar tensor
    """
    check_same_shape(p_day, p_night, "loss_focal_ssl")
    day = argmax_confidence(p_day.detach())
    p_n = torch.gather(p_night, 1, day.labels.unsqueeze(1)).squeeze(1)
    nll = -torch.log(torch.clamp(p_n, min=LOG_EPS))
    return torch.mean(focal_weight(day.conf, gamma) * nll)
