# -*- coding: utf-8 -*-

import shutil

import numpy as np
import pytest
import torch

from bimix_toolbox._errors import DataError, PairingError
from bimix_toolbox._utils import rng_substream
from bimix_toolbox._dataset import SyntheticSceneLoader, read_image, read_labels
from bimix_toolbox.synthdata import sample_scene, render, to_uint8

from conftest import TINY_COUNTS, TINY_SIZE


@pytest.fixture
def dataset_copy(tiny_dataset, tmp_path):
    root = tmp_path / "data"
    shutil.copytree(str(tiny_dataset), str(root))
    return root


def test_source_set(tiny_dataset):
    source = SyntheticSceneLoader(tiny_dataset).source()
    assert len(source) == TINY_COUNTS.source
    assert source.images.shape == (TINY_COUNTS.source, 3, TINY_SIZE, TINY_SIZE)
    assert source.images.dtype == torch.float32
    assert source.labels.shape == (TINY_COUNTS.source, TINY_SIZE, TINY_SIZE)
    assert source.labels.dtype == torch.int64
    assert source.names[0] == "src_00000"


def test_files_match_renderer(tiny_dataset):
    spec = sample_scene(rng_substream(0, "scene", "source", 0), image_size=TINY_SIZE)
    image, labels = render(spec, "source", rng_substream(0, "render", "source", 0, "source"))
    stored = read_image(tiny_dataset / "source" / "images" / "src_00000.png")
    assert np.array_equal(np.round(stored * 255.0).astype(np.uint8), to_uint8(image))
    assert np.array_equal(read_labels(tiny_dataset / "source" / "labels" / "src_00000.png"), labels)


def test_pairs(tiny_dataset):
    pairs = SyntheticSceneLoader(tiny_dataset).pairs()
    assert len(pairs) == TINY_COUNTS.pairs
    assert pairs.day.shape == pairs.night.shape
    assert pairs.names == ["pair_%05d" % i for i in range(TINY_COUNTS.pairs)]
    assert float(pairs.night.mean()) < float(pairs.day.mean())


def test_evaluation_splits(tiny_dataset):
    loader = SyntheticSceneLoader(tiny_dataset)
    assert len(loader.evaluation("test")) == TINY_COUNTS.test
    assert len(loader.evaluation("val")) == TINY_COUNTS.val
    assert loader.has_split("val") and not loader.has_split("train")
    with pytest.raises(ValueError):
        loader.evaluation("train")


def test_missing_root(tmp_path):
    with pytest.raises(DataError):
        SyntheticSceneLoader(tmp_path / "nowhere")


def test_unpaired_night(dataset_copy):
    (dataset_copy / "target" / "night" / "pair_00001.png").unlink()
    with pytest.raises(PairingError):
        SyntheticSceneLoader(dataset_copy).pairs()


def test_missing_labels(dataset_copy):
    shutil.rmtree(str(dataset_copy / "test" / "labels"))
    with pytest.raises(DataError):
        SyntheticSceneLoader(dataset_copy).evaluation("test")
    (dataset_copy / "val" / "labels" / "val_00000.png").unlink()
    with pytest.raises(DataError):
        SyntheticSceneLoader(dataset_copy).evaluation("val")
