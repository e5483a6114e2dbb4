# -*- coding: utf-8 -*-

"""
Loaders for the on-disk dataset layout

    root/source/{images,labels}   labeled source scenes
    root/target/{day,night}       unlabeled day/night pairs, paired by file stem
    root/test/{images,labels}     labeled night test scenes
    root/val/{images,labels}      labeled night validation scenes

All splits are small enough to be held in memory as tensors. Other datasets can
be plugged in by a loader class with the same three methods, selected by name
through the `loader` configuration field.
"""

from pathlib import Path
from typing import NamedTuple, List

import numpy as np
import torch
from PIL import Image
from loguru import logger

from ._errors import DataError, PairingError


class LabeledSet(NamedTuple):
    images: torch.Tensor
    labels: torch.Tensor
    names: List[str]

    def __len__(self):
        return len(self.names)


class PairedSet(NamedTuple):
    day: torch.Tensor
    night: torch.Tensor
    names: List[str]

    def __len__(self):
        return len(self.names)


def read_image(filepath):
    """
    Read an 8-bit RGB png as float image in [0, 1]
    :return: (numpy.ndarray) (H, W, 3) float32
    """
    with Image.open(str(filepath)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def read_labels(filepath):
    """
    Read a single channel png of class ids
    :return: (numpy.ndarray) (H, W) int64
    """
    with Image.open(str(filepath)) as img:
        return np.asarray(img, dtype=np.int64)


def images_to_tensor(images):
    """ Stack (H, W, 3) arrays to a (N, 3, H, W) float32 tensor """
    return torch.from_numpy(np.stack(images, axis=0)).permute(0, 3, 1, 2).contiguous()


class SyntheticSceneLoader(object):
    """
    Reads the splits written by `synthdata.write_dataset` (or any dataset following
    the same directory layout)
    """

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DataError("Dataset directory does not exist: %s" % self.root)

    def _stems(self, directory):
        if not directory.is_dir():
            raise DataError("Missing dataset directory: %s" % directory)
        stems = sorted(p.stem for p in directory.glob("*.png"))
        if not stems:
            raise DataError("No png files in %s" % directory)
        return stems

    def _labeled(self, image_dir, label_dir):
        stems = self._stems(image_dir)
        if not label_dir.is_dir():
            raise DataError("Missing label directory: %s" % label_dir)
        missing = [s for s in stems if not (label_dir / (s + ".png")).is_file()]
        if missing:
            raise DataError("%d images without labels in %s (e.g. %s)" % (len(missing), label_dir, missing[0]))
        images = images_to_tensor([read_image(image_dir / (s + ".png")) for s in stems])
        labels = torch.from_numpy(np.stack([read_labels(label_dir / (s + ".png")) for s in stems], axis=0))
        logger.debug("Loaded %d labeled images from %s" % (len(stems), image_dir))
        return LabeledSet(images=images, labels=labels, names=stems)

    def source(self):
        """ Labeled source scenes """
        return self._labeled(self.root / "source" / "images", self.root / "source" / "labels")

    def pairs(self):
        """ Day/night pairs sharing a file stem """
        day_dir, night_dir = self.root / "target" / "day", self.root / "target" / "night"
        day_stems, night_stems = self._stems(day_dir), self._stems(night_dir)
        if day_stems != night_stems:
            unpaired = sorted(set(day_stems).symmetric_difference(night_stems))
            raise PairingError("%d unpaired target images (e.g. %s)" % (len(unpaired), unpaired[0]))
        day = images_to_tensor([read_image(day_dir / (s + ".png")) for s in day_stems])
        night = images_to_tensor([read_image(night_dir / (s + ".png")) for s in night_stems])
        logger.debug("Loaded %d day/night pairs" % len(day_stems))
        return PairedSet(day=day, night=night, names=day_stems)

    def evaluation(self, split="test"):
        """ Labeled night scenes of the `test` or `val` split """
        if split not in ("test", "val"):
            raise ValueError("Unknown evaluation split: %s (known splits: test, val)" % str(split))
        return self._labeled(self.root / split / "images", self.root / split / "labels")

    def has_split(self, split):
        return (self.root / split / "images").is_dir()
