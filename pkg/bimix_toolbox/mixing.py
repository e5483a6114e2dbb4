# -*- coding: utf-8 -*-

"""
Mask construction and sample mixing for the two mixing directions:

- translation -> segmentation: half of the classes of a labeled source image are
  pasted onto a night image, the label is the source label inside the mask and the
  night pseudo-label outside.
- segmentation -> translation: the dynamic objects predicted in a day image are
  pasted onto its paired night image.

Mixing always operates on raw images, the mixed result is relighted afterwards.
"""

import math

import numpy as np
import torch

from ._errors import DimensionError, EmptyClassesError
from ._imgcore import IGNORE_ID, argmax_confidence, check_same_shape


def classes_present(y):
    """
    Sorted class ids present in a label map (ignore id excluded)
    :param y: (torch.Tensor) label map (H, W) or (N, H, W)
    :return: numpy int array
    """
    ids = torch.unique(y).cpu().numpy()
    return np.sort(ids[ids != IGNORE_ID])


def sample_half_classes(y, rng):
    """
    Draw ceil(n/2) of the n classes present in a label map uniformly without
    replacement
    :param y: (torch.Tensor) label map of a single image (H, W)
    :param rng: (numpy.random.Generator) the class sampling stream
    :return: frozenset of class ids
    """
    present = classes_present(y)
    if present.size == 0:
        raise EmptyClassesError("label map contains only ignored pixels")
    n_selected = int(math.ceil(present.size / 2.0))
    selected = rng.choice(present, size=n_selected, replace=False)
    return frozenset(int(class_id) for class_id in selected)


def mask_from_classes(y, class_set):
    """
    Binary mask that is 1 where the label is in the class set. Ignored pixels
    are never selected.
    :param y: (torch.Tensor) label map (..., H, W)
    :param class_set: iterable of class ids
    :return: (torch.Tensor) float mask with the shape of y
    """
    ids = sorted(int(class_id) for class_id in class_set if int(class_id) != IGNORE_ID)
    if len(ids) == 0:
        return torch.zeros(y.shape, dtype=torch.float32, device=y.device)
    selected = torch.isin(y, torch.tensor(ids, dtype=y.dtype, device=y.device))
    return selected.to(torch.float32)


def classmix_masks(y_batch, rng):
    """
    Class mixing masks for every sample of a label batch, drawn in batch order
    :param y_batch: (torch.Tensor) label maps (N, H, W)
    :param rng: (numpy.random.Generator) the class sampling stream
    :return: (masks (N, H, W), list of class sets)
    """
    class_sets = [sample_half_classes(y, rng) for y in y_batch]
    masks = torch.stack([mask_from_classes(y, cs) for y, cs in zip(y_batch, class_sets)])
    return masks, class_sets


def dynamic_mask(day_pred, dynamic_classes):
    """
    Mask of the pixels whose day prediction is a dynamic class. The prediction is a
    constant here, no gradient flows through the mask.
    :param day_pred: ConfidenceMap of the day prediction (or a prob map)
    :param dynamic_classes: iterable of dynamic class ids
    :return: (torch.Tensor) float mask (N, H, W)
    """
    if isinstance(day_pred, torch.Tensor):
        day_pred = argmax_confidence(day_pred.detach())
    return mask_from_classes(day_pred.labels.detach(), dynamic_classes)


def _check_mask(image, mask):
    if tuple(image.shape[-2:]) != tuple(mask.shape[-2:]) or image.shape[0] != mask.shape[0]:
        msg = "mask shape {} does not fit image shape {}".format(tuple(mask.shape), tuple(image.shape))
        raise DimensionError(msg)


def mix_images(a, b, m):
    """
    Pixelwise selection out = a where m=1, b where m=0
    :param a: (torch.Tensor) first image batch (N, 3, H, W)
    :param b: (torch.Tensor) second image batch (N, 3, H, W)
    :param m: (torch.Tensor) binary mask (N, H, W)
    :return: (torch.Tensor) mixed image batch (N, 3, H, W)
    """
    check_same_shape(a, b, "mix_images")
    _check_mask(a, m)
    return torch.where(m.unsqueeze(1) > 0.5, a, b)


def mix_labels(y_s, p_n, m):
    """
    Mixed label: source label inside the mask, night pseudo-label (argmax) outside.
    The pseudo-label side is detached from the night forward pass.
    :param y_s: (torch.Tensor) source label map (N, H, W)
    :param p_n: (torch.Tensor) night prob map (N, C, H, W)
    :param m: (torch.Tensor) binary mask (N, H, W)
    :return: (torch.Tensor) mixed label map (N, H, W)
    """
    pseudo = argmax_confidence(p_n.detach()).labels
    check_same_shape(y_s, pseudo, "mix_labels")
    check_same_shape(y_s, m, "mix_labels")
    return torch.where(m > 0.5, y_s, pseudo.to(y_s.dtype))
