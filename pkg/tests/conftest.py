# -*- coding: utf-8 -*-

import numpy as np
import pytest
import torch

from bimix_toolbox import BimixCfg
from bimix_toolbox._trainer import TrainingBatch
from bimix_toolbox.synthdata import DatasetCounts, write_dataset

TINY_SIZE = 32
TINY_COUNTS = DatasetCounts(source=6, pairs=4, test=3, val=2)


def random_images(rng, n=1, size=8, channels=3):
    return torch.from_numpy(rng.uniform(0.0, 1.0, size=(n, channels, size, size))).to(torch.float32)


def random_labels(rng, n=1, size=8, num_classes=8):
    return torch.from_numpy(rng.integers(0, num_classes, size=(n, size, size))).to(torch.int64)


def random_probs(rng, n=1, num_classes=4, size=8):
    logits = torch.from_numpy(rng.normal(0.0, 2.0, size=(n, num_classes, size, size))).to(torch.float32)
    return torch.softmax(logits, dim=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return BimixCfg(image_size=TINY_SIZE, pool_k=16, batch_size=2, max_iters=6, pretrain_iters=4, base_lr=0.01,
                    pretrain_lr=0.05, eval_every=0, checkpoint_every=0, log_every=0)


@pytest.fixture
def tiny_batch():
    """ A random training batch of 32x32 images with all 8 classes """
    rng = np.random.default_rng(7)
    return TrainingBatch(source_images=random_images(rng, n=2, size=TINY_SIZE),
                         source_labels=random_labels(rng, n=2, size=TINY_SIZE),
                         day_images=random_images(rng, n=2, size=TINY_SIZE),
                         night_images=0.3 * random_images(rng, n=2, size=TINY_SIZE),
                         day_names=["pair_00000", "pair_00001"],
                         night_names=["pair_00000", "pair_00001"])


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """ Small synthetic benchmark on disk, shared by the whole session (read only) """
    root = tmp_path_factory.mktemp("synth") / "data"
    write_dataset(root, counts=TINY_COUNTS, seed=0, image_size=TINY_SIZE)
    return root
