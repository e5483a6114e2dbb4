# -*- coding: utf-8 -*-

"""
Shared image and tensor math for the enhancement losses, the segmentation losses
and both mixing directions.

All functions work on batched torch tensors:

    image       (N, 3, H, W)   real values, nominally in [0, 1]
    label map   (N, H, W)      int64 class ids in [0, C) or IGNORE_ID
    prob map    (N, C, H, W)   softmax output, channel sum 1
    binary mask (N, H, W)      values in {0, 1}

The functions are pure and keep the dtype of their input, so the gradient checks
run them in float64 while the training loop uses float32.
"""

from typing import NamedTuple

import torch
import torch.nn.functional as F

from ._errors import DimensionError, LabelError

IGNORE_ID = 255

# SSIM window and stabilizers for a dynamic range of L=1
SSIM_WINDOW_SIZE = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2


class ConfidenceMap(NamedTuple):
    """ Per-pixel argmax class (N, H, W) and its probability (N, H, W) """
    labels: torch.Tensor
    conf: torch.Tensor


def check_same_shape(a, b, context=""):
    """ Raise a DimensionError if the two tensors differ in shape """
    if tuple(a.shape) != tuple(b.shape):
        msg = "shape mismatch{}: {} vs {}".format(" in " + context if context else "",
                                                  tuple(a.shape), tuple(b.shape))
        raise DimensionError(msg)


def average_pool(img, k):
    """
    Average pooling with non-overlapping k x k windows
    :param img: (torch.Tensor) image batch (N, 3, H, W)
    :param k: (int) window size in pixels
    :return: (torch.Tensor) pooled map (N, 3, H/k, W/k)
    """
    height, width = img.shape[-2:]
    if height % k != 0 or width % k != 0:
        msg = "image size {}x{} not divisible by pooling window {}".format(height, width, k)
        raise DimensionError(msg)

    # Pairwise tree summation: exact for constant blocks when k*k is a power of two
    n, c = img.shape[0], img.shape[1]
    blocks = img.reshape(n, c, height // k, k, width // k, k).permute(0, 1, 2, 4, 3, 5)
    values = blocks.reshape(n, c, height // k, width // k, k * k)
    while values.shape[-1] > 1:
        half = values.shape[-1] // 2
        paired = values[..., :half] + values[..., half:2 * half]
        if values.shape[-1] % 2:
            paired = torch.cat([paired, values[..., -1:]], dim=-1)
        values = paired
    return values[..., 0] / float(k * k)


def upsample_blocks(pooled, k):
    """ Broadcast every pooled cell back over its k x k block """
    return pooled.repeat_interleave(k, dim=-2).repeat_interleave(k, dim=-1)


def spatial_gradients(img):
    """
    Forward differences along columns (gx) and rows (gy). The trailing column of gx
    and the trailing row of gy are zero.
    :param img: (torch.Tensor) image batch (N, 3, H, W)
    :return: (gx, gy) with the shape of img
    """
    gx = F.pad(img[..., :, 1:] - img[..., :, :-1], (0, 1, 0, 0))
    gy = F.pad(img[..., 1:, :] - img[..., :-1, :], (0, 0, 0, 1))
    return gx, gy


def _reflect_indices(n, pad, device):
    """
    Indices of a reflect-padded axis (edge sample not repeated: d c b | a b c d).
    Works for any axis length, including pads larger than the axis.
    """
    idx = torch.arange(-pad, n + pad, device=device)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = torch.remainder(idx, period)
    return torch.where(idx >= n, period - idx, idx)


def _gaussian_window(dtype, device):
    coords = torch.arange(SSIM_WINDOW_SIZE, dtype=dtype, device=device) - SSIM_WINDOW_SIZE // 2
    g = torch.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def _local_mean(x, window):
    """ Depthwise gaussian filtering with reflect padding """
    pad = SSIM_WINDOW_SIZE // 2
    height, width = x.shape[-2:]
    rows = _reflect_indices(height, pad, x.device)
    cols = _reflect_indices(width, pad, x.device)
    padded = x.index_select(-2, rows).index_select(-1, cols)
    n_channels = x.shape[1]
    kernel = window.expand(n_channels, 1, SSIM_WINDOW_SIZE, SSIM_WINDOW_SIZE)
    return F.conv2d(padded, kernel, groups=n_channels)


def ssim_map(a, b):
    """
    Local structural similarity of two image batches (11x11 gaussian window,
    sigma 1.5, reflect padded borders)
    :param a: (torch.Tensor) image batch (N, 3, H, W)
    :param b: (torch.Tensor) image batch (N, 3, H, W)
    :return: (torch.Tensor) per-pixel, per-channel SSIM (N, 3, H, W)
    """
    check_same_shape(a, b, "ssim_map")
    window = _gaussian_window(a.dtype, a.device)

    mu_a = _local_mean(a, window)
    mu_b = _local_mean(b, window)
    var_a = _local_mean(a * a, window) - mu_a ** 2
    var_b = _local_mean(b * b, window) - mu_b ** 2
    cov_ab = _local_mean(a * b, window) - mu_a * mu_b

    numerator = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov_ab + SSIM_C2)
    denominator = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return numerator / denominator


def argmax_confidence(p):
    """
    Per-pixel most likely class and its probability. Ties resolve to the lowest
    class id.
    :param p: (torch.Tensor) prob map (N, C, H, W)
    :return: ConfidenceMap
    """
    labels = torch.argmax(p, dim=1)
    conf = torch.gather(p, 1, labels.unsqueeze(1)).squeeze(1)
    return ConfidenceMap(labels=labels, conf=conf)


def validate_labels(y, num_classes):
    """ Raise a LabelError for ids outside [0, C) that are not IGNORE_ID """
    invalid = (y != IGNORE_ID) & ((y < 0) | (y >= num_classes))
    if bool(invalid.any()):
        bad_ids = sorted(set(torch.unique(y[invalid]).tolist()))
        raise LabelError("label ids {} outside [0, {}) and not {}".format(bad_ids, num_classes, IGNORE_ID))


def one_hot(y, num_classes, dtype=torch.float32):
    """
    One-hot encoding of a label map, all channels zero on ignored pixels
    :param y: (torch.Tensor) label map (N, H, W)
    :param num_classes: (int) number of classes C
    :param dtype: dtype of the output
    :return: (torch.Tensor) (N, C, H, W) with values in {0, 1}
    """
    validate_labels(y, num_classes)
    valid = y != IGNORE_ID
    safe = torch.where(valid, y, torch.zeros_like(y)).long()
    encoded = F.one_hot(safe, num_classes).permute(0, 3, 1, 2).to(dtype)
    return encoded * valid.unsqueeze(1).to(dtype)
