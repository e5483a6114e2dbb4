# -*- coding: utf-8 -*-

import json
from collections import OrderedDict

import numpy as np
import pytest
import torch

from bimix_toolbox._errors import CheckpointError, DimensionError, IntegrityError
from bimix_toolbox._checkpoint import Checkpoint, pack_arrays, unpack_arrays, PARAMS_FILENAME, MANIFEST_FILENAME
from bimix_toolbox._trainer import BimixTrainer
from bimix_toolbox.segmentation import seg_forward

from conftest import random_images


def test_pack_unpack(rng):
    arrays = OrderedDict((("a", rng.normal(size=(3, 2)).astype(np.float32)),
                          ("b/scalar", np.array(2.5, dtype=np.float32))))
    unpacked = unpack_arrays(pack_arrays(arrays))
    assert list(unpacked.keys()) == ["a", "b/scalar"]
    assert np.array_equal(unpacked["a"], arrays["a"])
    assert unpacked["b/scalar"].shape == ()


def test_unpack_garbage():
    with pytest.raises(IntegrityError):
        unpack_arrays(b"not a container")


def test_round_trip_predictions_bitwise(tiny_cfg, tiny_batch, tmp_path, rng):
    trainer = BimixTrainer(tiny_cfg)
    trainer.train_step(tiny_batch)
    Checkpoint.from_trainer(trainer, "adapt").save(tmp_path / "ckpt")

    restored = BimixTrainer(tiny_cfg.replace(seed=99))
    checkpoint = Checkpoint.load(tmp_path / "ckpt")
    checkpoint.apply_to(restored)
    images = random_images(rng, n=2, size=32)
    with torch.no_grad():
        assert torch.equal(seg_forward(trainer.seg_net, images), seg_forward(restored.seg_net, images))
    assert checkpoint.iteration == 1
    assert checkpoint.config_digest == tiny_cfg.digest
    assert checkpoint.phase == "adapt"


def test_optimizer_state_round_trip(tiny_cfg, tiny_batch, tmp_path):
    trainer = BimixTrainer(tiny_cfg)
    trainer.train_step(tiny_batch)
    Checkpoint.from_trainer(trainer, "adapt").save(tmp_path / "ckpt")
    restored = BimixTrainer(tiny_cfg)
    Checkpoint.load(tmp_path / "ckpt").apply_to(restored, load_optimizers=True)
    for name, optimizer in trainer.optimizers().items():
        expected = optimizer.state_dict()["state"]
        found = restored.optimizers()[name].state_dict()["state"]
        assert sorted(found.keys()) == sorted(expected.keys())
        for index, state in expected.items():
            for key, value in state.items():
                if isinstance(value, torch.Tensor):
                    assert found[index][key].shape == value.shape
                    assert torch.equal(found[index][key].to(value.dtype), value)


def test_wrong_class_count(tiny_cfg, tmp_path):
    Checkpoint.from_trainer(BimixTrainer(tiny_cfg), "pretrain").save(tmp_path / "ckpt")
    other = BimixTrainer(tiny_cfg.replace(num_classes=6, dynamic_classes=(4, 5)))
    with pytest.raises(DimensionError):
        Checkpoint.load(tmp_path / "ckpt").apply_to(other)


def test_tampered_payload(tiny_cfg, tmp_path):
    Checkpoint.from_trainer(BimixTrainer(tiny_cfg), "pretrain").save(tmp_path / "ckpt")
    params = tmp_path / "ckpt" / PARAMS_FILENAME
    payload = bytearray(params.read_bytes())
    payload[-1] ^= 0xFF
    params.write_bytes(bytes(payload))
    with pytest.raises(IntegrityError):
        Checkpoint.load(tmp_path / "ckpt")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "nowhere")


def test_missing_array(tiny_cfg):
    checkpoint = Checkpoint.from_trainer(BimixTrainer(tiny_cfg), "pretrain")
    del checkpoint.arrays[next(key for key in checkpoint.arrays if key.startswith("seg/"))]
    with pytest.raises(CheckpointError):
        checkpoint.apply_to(BimixTrainer(tiny_cfg))


def test_manifest_content(tiny_cfg, tmp_path):
    Checkpoint.from_trainer(BimixTrainer(tiny_cfg), "pretrain").save(tmp_path / "ckpt")
    with open(str(tmp_path / "ckpt" / MANIFEST_FILENAME)) as f:
        manifest = json.load(f)
    assert manifest["format_version"] == 1
    assert manifest["iteration"] == 0
    assert manifest["model_digest"] == tiny_cfg.model_digest
    assert set(manifest["optimizers"].keys()) == {"opt_gen", "opt_disc", "opt_pretrain"}
