# -*- coding: utf-8 -*-

"""
The relighting network f, the enhancement composition I_en = f(I) + I and the
self-supervised losses that train f (total variation, exposure, structural
similarity, and the day/mixed consistency loss).
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._imgcore import average_pool, upsample_blocks, spatial_gradients, ssim_map, check_same_shape
from ._utils import init_parameters

DEFAULT_ALPHA = (10.0, 1.0, 1.0)
DEFAULT_POOL_K = 32


class RelightNet(nn.Module):
    """
    Small convolutional encoder-decoder predicting a 3-channel residual at input
    resolution. The last layer is zero-initialized, so f(I) = 0 before training.
    """

    def __init__(self, rng=None):
        """
        :param rng: (numpy.random.Generator) initialization stream (torch default init if None)
        """
        super(RelightNet, self).__init__()
        self.down1 = nn.Conv2d(3, 16, kernel_size=3, stride=2, padding=1)
        self.down2 = nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1)
        self.down3 = nn.Conv2d(32, 64, kernel_size=3, stride=2, padding=1)
        self.up1 = nn.ConvTranspose2d(64, 32, kernel_size=4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(32, 16, kernel_size=4, stride=2, padding=1)
        self.up3 = nn.ConvTranspose2d(16, 3, kernel_size=4, stride=2, padding=1)
        if rng is not None:
            init_parameters(self, rng, zero_init=("up3",))
        else:
            with torch.no_grad():
                self.up3.weight.zero_()
                self.up3.bias.zero_()

    def forward(self, x):
        height, width = x.shape[-2:]
        h = F.relu(self.down1(x))
        h = F.relu(self.down2(h))
        h = F.relu(self.down3(h))
        h = F.relu(self.up1(h))
        h = F.relu(self.up2(h))
        h = self.up3(h)
        # Sizes not divisible by 8 do not reconstruct exactly
        if tuple(h.shape[-2:]) != (height, width):
            h = F.interpolate(h, size=(height, width), mode="bilinear", align_corners=False)
        return h


class EnhancementLossReport(object):
    """
    Container for the three enhancement loss components and their weighted total
    """

    def __init__(self, tv, exp, ssim, alpha=DEFAULT_ALPHA):
        """
        :param tv: total variation loss (scalar tensor)
        :param exp: exposure loss (scalar tensor)
        :param ssim: structural similarity loss (scalar tensor)
        :param alpha: (alpha_tv, alpha_exp, alpha_ssim)
        """
        self.tv = tv
        self.exp = exp
        self.ssim = ssim
        self.alpha = tuple(float(a) for a in alpha)
        alpha_tv, alpha_exp, alpha_ssim = self.alpha
        self.total = alpha_tv * tv + alpha_exp * exp + alpha_ssim * ssim

    def as_floats(self):
        """ Return the report as a dict of python floats """
        values = dict(tv=self.tv, exp=self.exp, ssim=self.ssim, total=self.total)
        return {key: float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
                for key, value in values.items()}

    @classmethod
    def zeros(cls, alpha=DEFAULT_ALPHA):
        """ Report of a disabled relighting network """
        zero = torch.zeros(())
        return cls(zero, zero.clone(), zero.clone(), alpha=alpha)


def relight(net, img):
    """
    Residual I_re = f(I)
    :param net: the relighting network (any module mapping (N,3,H,W) to the same shape)
    :param img: (torch.Tensor) image batch (N, 3, H, W)
    :return: (torch.Tensor) residual (N, 3, H, W)
    """
    return net(img)


def enhance(net, img):
    """
    Enhanced image I_en = f(I) + I, without clamping
    :param net: the relighting network
    :param img: (torch.Tensor) image batch (N, 3, H, W)
    :return: (I_re, I_en)
    """
    residual = relight(net, img)
    return residual, residual + img


def loss_tv(img, residual):
    """
    Mean of the squared forward-difference gradients of (I - I_re)
    :param img: (torch.Tensor) I
    :param residual: (torch.Tensor) I_re
    :return: scalar tensor
    """
    check_same_shape(img, residual, "loss_tv")
    gx, gy = spatial_gradients(img - residual)
    return torch.mean(torch.abs(gx ** 2 + gy ** 2))


def loss_exposure(residual, enhanced, pool_k=DEFAULT_POOL_K):
    """
    Mean absolute difference between the block-pooled residual, broadcast back over
    its blocks, and the enhanced image
    :param residual: (torch.Tensor) I_re
    :param enhanced: (torch.Tensor) I_en
    :param pool_k: (int) pooling window
    :return: scalar tensor
    """
    check_same_shape(residual, enhanced, "loss_exposure")
    pooled = upsample_blocks(average_pool(residual, pool_k), pool_k)
    return torch.mean(torch.abs(pooled - enhanced))


def loss_ssim(img, residual):
    """
    Half the mean of |1 - SSIM(I, I_re)| over pixels and channels
    :param img: (torch.Tensor) I
    :param residual: (torch.Tensor) I_re
    :return: scalar tensor
    """
    check_same_shape(img, residual, "loss_ssim")
    return 0.5 * torch.mean(torch.abs(1.0 - ssim_map(img, residual)))


def loss_consistency(residual_mixed, residual_day):
    """
    L1 consistency between the relighted mixed image and the relighted day image.
    The day residual is a fixed target.
    :param residual_mixed: (torch.Tensor) relight of the day/night mix
    :param residual_day: (torch.Tensor) relight of the day image
    :return: scalar tensor
    """
    check_same_shape(residual_mixed, residual_day, "loss_consistency")
    return torch.mean(torch.abs(residual_mixed - residual_day.detach()))


def enhancement_report(pairs, alpha=DEFAULT_ALPHA, pool_k=DEFAULT_POOL_K):
    """
    Enhancement losses averaged over a list of (I, I_re) pairs
    :param pairs: list of (image, residual) tensors, one per domain
    :param alpha: (alpha_tv, alpha_exp, alpha_ssim)
    :param pool_k: pooling window of the exposure loss
    :return: EnhancementLossReport
    """
    n_pairs = float(len(pairs))
    tv = sum(loss_tv(img, res) for img, res in pairs) / n_pairs
    exp = sum(loss_exposure(res, res + img, pool_k) for img, res in pairs) / n_pairs
    ssim = sum(loss_ssim(img, res) for img, res in pairs) / n_pairs
    return EnhancementLossReport(tv, exp, ssim, alpha=alpha)


def loss_enhance_total(img_source, img_day, img_night, net, alpha=DEFAULT_ALPHA, pool_k=DEFAULT_POOL_K):
    """
    Weighted enhancement loss of the three domain images
    :return: EnhancementLossReport
    """
    pairs = [(img, relight(net, img)) for img in (img_source, img_day, img_night)]
    return enhancement_report(pairs, alpha=alpha, pool_k=pool_k)
