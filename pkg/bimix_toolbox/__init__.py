# -*- coding: utf-8 -*-

"""
The bimix-toolbox python package adapts a day-trained semantic segmentation network
to night images by bidirectional mixing between a relighting network and the
segmentation network, and ships a procedural day/night street scene benchmark to
train and evaluate it on a desk computer.
"""

__all__ = ["mixing", "enhancement", "segmentation", "adversarial", "evaluation", "gradcheck", "graphics",
           "synthdata", "scripts",
           "BimixCfg", "BimixTrainer", "StepReport", "Checkpoint", "ConfusionMatrix",
           "RelightNet", "SegNet", "Discriminator", "SyntheticSceneLoader",
           "get_cls", "get_yaml_cfg", "__version__"]

import sys
from pathlib import Path

# Get version from VERSION in package root
PACKAGE_ROOT_DIR = Path(__file__).absolute().parent
version_filepath = PACKAGE_ROOT_DIR / "VERSION"
try:
    with open(version_filepath) as f:
        version = f.read().strip()
except IOError:
    sys.exit("Cannot find VERSION file in package (expected: {}".format(version_filepath))

# Package Metadata
__version__ = version

from ._utils import (get_cls, get_yaml_cfg)
from ._checkpoint import Checkpoint
from ._trainer import (BimixCfg, BimixTrainer, StepReport)
from ._dataset import SyntheticSceneLoader
from .enhancement import RelightNet
from .segmentation import SegNet
from .adversarial import Discriminator
from .evaluation import ConfusionMatrix
