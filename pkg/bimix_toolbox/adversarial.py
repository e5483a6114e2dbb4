# -*- coding: utf-8 -*-

"""
Output-space discriminators and the least-squares adversarial losses. Both
discriminators see the source prediction as real; the day discriminator sees the
day prediction as fake, the night discriminator the night prediction.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._utils import init_parameters

# Smallest square input with a non-empty realism map
MIN_INPUT_SIZE = 16


class Discriminator(nn.Module):
    """
    Four strided (stride 2) convolutions mapping a prob map (N, C, H, W) to a raw
    realism map (N, 1, H/16, W/16)
    """

    def __init__(self, num_classes, ndf=32, rng=None):
        """
        :param num_classes: (int) number of input channels C
        :param ndf: (int) channels of the first layer
        :param rng: (numpy.random.Generator) initialization stream (torch default init if None)
        """
        super(Discriminator, self).__init__()
        self.conv1 = nn.Conv2d(num_classes, ndf, kernel_size=4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(ndf, ndf * 2, kernel_size=4, stride=2, padding=1)
        self.conv3 = nn.Conv2d(ndf * 2, ndf * 4, kernel_size=4, stride=2, padding=1)
        self.classifier = nn.Conv2d(ndf * 4, 1, kernel_size=4, stride=2, padding=1)
        if rng is not None:
            init_parameters(self, rng)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), negative_slope=0.2)
        h = F.leaky_relu(self.conv2(h), negative_slope=0.2)
        h = F.leaky_relu(self.conv3(h), negative_slope=0.2)
        return self.classifier(h)


def disc_forward(disc, p):
    """
    Realism scores of a prob map, no output activation
    :param disc: discriminator module
    :param p: (torch.Tensor) prob map (N, C, H, W)
    :return: (torch.Tensor) realism map
    """
    return disc(p)


def loss_adv_gen(dd_out, dn_out):
    """
    Generator side: push the day and night realism maps towards 1
    :param dd_out: day discriminator output on the day prediction
    :param dn_out: night discriminator output on the night prediction
    :return: scalar tensor
    """
    return torch.mean((dd_out - 1.0) ** 2) + torch.mean((dn_out - 1.0) ** 2)


def loss_disc(dd_s, dn_s, dd_d, dn_n):
    """
    Discriminator side: source maps towards 1, target maps towards 0
    :param dd_s: day discriminator on the source prediction
    :param dn_s: night discriminator on the source prediction
    :param dd_d: day discriminator on the day prediction
    :param dn_n: night discriminator on the night prediction
    :return: scalar tensor
    """
    return (torch.mean((dd_s - 1.0) ** 2) + torch.mean((dn_s - 1.0) ** 2)
            + torch.mean(dd_d ** 2) + torch.mean(dn_n ** 2))
