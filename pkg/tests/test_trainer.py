# -*- coding: utf-8 -*-

import math
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn
from scipy.ndimage import gaussian_filter

import bimix_toolbox
from bimix_toolbox._errors import ScheduleRangeError, PairingError, CheckpointError, DataError
from bimix_toolbox._imgcore import SSIM_C1, SSIM_C2
from bimix_toolbox._utils import rng_substream, init_parameters
from bimix_toolbox._checkpoint import Checkpoint
from bimix_toolbox._dataset import SyntheticSceneLoader, LabeledSet
from bimix_toolbox._trainer import (BimixCfg, BimixTrainer, StepReport, TrainingBatch, BatchSampler, REPORT_KEYS,
                                    poly_lr, total_objective, generator_objective, pretrain, adapt)
from bimix_toolbox.mixing import mix_labels, mask_from_classes
from bimix_toolbox.segmentation import loss_mixed_ce

from conftest import random_images, random_labels

RESOURCES = Path(bimix_toolbox.__file__).parent / "resources"


class ListWriter(object):

    def __init__(self, stop_at=None):
        self.lines = []
        self.stop_at = stop_at

    def write(self, content):
        if self.stop_at is not None and content["iter"] == self.stop_at:
            raise KeyboardInterrupt()
        self.lines.append(dict(content))


# --- Learning rate schedule ---

def test_poly_lr_values():
    assert poly_lr(0, 2.5e-4, 1000) == 2.5e-4
    assert poly_lr(1000, 2.5e-4, 1000) == 0.0
    assert poly_lr(500, 2.5e-4, 1000) == pytest.approx(1.3397e-4, rel=1e-4)


def test_poly_lr_range():
    with pytest.raises(ScheduleRangeError):
        poly_lr(1001, 2.5e-4, 1000)
    with pytest.raises(ScheduleRangeError):
        poly_lr(-1, 2.5e-4, 1000)


def test_poly_lr_monotone():
    rates = [poly_lr(i, 0.01, 300) for i in range(301)]
    assert all(a >= b for a, b in zip(rates[:-1], rates[1:]))


# --- Objective ---

def _components(value):
    return dict(l_enhance=value, l_M=value, l_D=value, l_adv=value, l_f2m=value, l_m2f=value, l_ssl=value)


def test_total_objective_values():
    cfg = BimixCfg()
    assert total_objective(_components(0.0), cfg) == 0.0
    assert total_objective(_components(1.0), cfg) == pytest.approx(5.002, abs=1e-12)


def test_total_objective_baseline_excludes_mixing_terms():
    components = _components(1.0)
    components.update(l_f2m=100.0, l_m2f=100.0)
    assert total_objective(components, BimixCfg(mode="baseline")) == 5.0
    assert total_objective(components, BimixCfg(mode="f2m")) == pytest.approx(5.1, abs=1e-12)
    assert total_objective(components, BimixCfg(mode="m2f")) == pytest.approx(5.1, abs=1e-12)


def test_generator_objective_excludes_disc_loss():
    components = _components(1.0)
    assert total_objective(components, BimixCfg()) - generator_objective(components, BimixCfg()) == 1.0


def test_adversarial_weight():
    components = _components(1.0)
    assert generator_objective(components, BimixCfg(mode="baseline", lambda_adv=0.001)) == pytest.approx(3.001)
    assert total_objective(components, BimixCfg(mode="baseline", lambda_adv=0.0)) == 4.0


# --- Configuration ---

@pytest.mark.parametrize("kwargs", [dict(mode="dual"), dict(mu1=-1.0), dict(alpha_ssim=-0.1), dict(max_iters=0),
                                    dict(dynamic_classes=(4, 9)), dict(lambda_adv=-0.5), dict(image_size=8)])
def test_cfg_invalid(kwargs):
    with pytest.raises(ValueError):
        BimixCfg(**kwargs)


def test_cfg_presets_match_resources():
    for name in ("desk", "full"):
        assert BimixCfg.from_cfg(RESOURCES / ("%s.yaml" % name)).digest == BimixCfg.preset(name).digest
    with pytest.raises(ValueError):
        BimixCfg.preset("laptop")


def test_cfg_preset_overrides_mode():
    cfg = BimixCfg.preset("desk", mode="baseline", relight_enabled=False)
    assert (cfg.mode, cfg.relight_enabled, cfg.base_lr) == ("baseline", False, 0.005)


def test_cfg_smallest_image_size():
    assert BimixCfg(image_size=16, pool_k=16).image_size == 16
    with pytest.raises(ValueError):
        BimixCfg(image_size=15, pool_k=15)


def test_cfg_desk_preset_values():
    cfg = BimixCfg.preset("desk", seed=3)
    assert (cfg.base_lr, cfg.pretrain_lr, cfg.disc_lr, cfg.lambda_adv) == (0.005, 0.05, 1e-4, 0.001)
    assert (cfg.max_iters, cfg.pretrain_iters, cfg.seed) == (3000, 1500, 3)
    assert (cfg.mu1, cfg.mu2, cfg.mu3) == (0.001, 0.001, 1.0)


def test_cfg_save_round_trip(tmp_path):
    cfg = BimixCfg.preset("desk", mode="m2f", relight_enabled=False)
    cfg.save(tmp_path / "config.yaml")
    loaded = BimixCfg.from_cfg(tmp_path / "config.yaml")
    assert loaded.digest == cfg.digest
    assert BimixCfg.from_cfg(tmp_path / "config.yaml", seed=9).seed == 9


def test_cfg_digests():
    cfg = BimixCfg()
    other = cfg.replace(mode="baseline")
    assert other.digest != cfg.digest
    assert other.model_digest == cfg.model_digest
    assert cfg.replace(num_classes=5, dynamic_classes=(3, 4)).model_digest != cfg.model_digest


def test_branch_activity():
    assert BimixCfg(mode="bimix").branch_active("f2m") and BimixCfg(mode="bimix").branch_active("m2f")
    assert not BimixCfg(mode="baseline").branch_active("f2m")
    assert not BimixCfg(mode="f2m").branch_active("m2f")
    assert not BimixCfg(mode="bimix", mu1=0.0).branch_active("f2m")


# --- Batches ---

def test_batch_sampler_covers_epochs():
    sampler = BatchSampler(5, 2, seed=0, split="source")
    first_epoch = sampler.indices(0) + sampler.indices(1) + sampler.indices(2)[:1]
    assert sorted(first_epoch) == list(range(5))
    assert BatchSampler(5, 2, seed=0, split="source").indices(7) == sampler.indices(7)


def test_batch_sampler_empty():
    with pytest.raises(DataError):
        BatchSampler(0, 2, seed=0, split="source")


def test_train_step_rejects_unpaired(tiny_cfg, tiny_batch):
    batch = tiny_batch._replace(night_names=["pair_00001", "pair_00000"])
    with pytest.raises(PairingError):
        BimixTrainer(tiny_cfg).train_step(batch)
    batch = tiny_batch._replace(night_images=tiny_batch.night_images[:1])
    with pytest.raises(PairingError):
        BimixTrainer(tiny_cfg).train_step(batch)


def test_train_step_beyond_schedule(tiny_cfg, tiny_batch):
    trainer = BimixTrainer(tiny_cfg.replace(max_iters=1))
    trainer.train_step(tiny_batch)
    with pytest.raises(ScheduleRangeError):
        trainer.train_step(tiny_batch)


# --- Training step ---

def test_step_report_keys_and_consistency(tiny_cfg, tiny_batch):
    trainer = BimixTrainer(tiny_cfg)
    for _ in range(3):
        report = trainer.train_step(tiny_batch)
        assert tuple(report.as_dict().keys()) == REPORT_KEYS
        assert abs(report.total - report.recombine(tiny_cfg)) <= 1e-6
        assert all(math.isfinite(v) for v in report.as_dict().values())
    assert report.iteration == 2


def test_baseline_step_has_no_mixing_terms(tiny_cfg, tiny_batch):
    report = BimixTrainer(tiny_cfg.replace(mode="baseline")).train_step(tiny_batch)
    assert report.components["l_f2m"] == 0.0 and report.components["l_m2f"] == 0.0


def test_train_step_determinism(tiny_cfg, tiny_batch):
    reports = []
    for _ in range(2):
        trainer = BimixTrainer(tiny_cfg)
        reports.append([trainer.train_step(tiny_batch).as_dict() for _ in range(3)])
    assert reports[0] == reports[1]


def _parameters(net):
    return [p.detach().clone() for p in net.parameters()]


def _unchanged(before, net):
    return all(torch.equal(a, b) for a, b in zip(before, net.parameters()))


def test_ablation_nesting(tiny_cfg, tiny_batch):
    nested = BimixTrainer(tiny_cfg.replace(mode="bimix", mu1=0.0, mu2=0.0))
    baseline = BimixTrainer(tiny_cfg.replace(mode="baseline"))
    for _ in range(3):
        nested.train_step(tiny_batch)
        baseline.train_step(tiny_batch)
    for net_a, net_b in zip(nested.networks().values(), baseline.networks().values()):
        assert _unchanged(_parameters(net_a), net_b)


def test_no_relight_bypass(tiny_cfg, tiny_batch):
    trainer = BimixTrainer(tiny_cfg.replace(relight_enabled=False))
    before = _parameters(trainer.relight_net)
    report = trainer.train_step(tiny_batch)
    assert report.components["l_enhance"] == 0.0 and report.components["l_m2f"] == 0.0
    assert report.enhancement == dict(tv=0.0, exp=0.0, ssim=0.0)
    assert _unchanged(before, trainer.relight_net)


@pytest.mark.parametrize("seed", range(100))
def test_gradient_isolation(seed):
    cfg = BimixCfg(image_size=32, pool_k=16, batch_size=1, max_iters=10, seed=seed, eval_every=0,
                   checkpoint_every=0, log_every=0)
    trainer = BimixTrainer(cfg)
    rng = np.random.default_rng(seed)
    batch = TrainingBatch(random_images(rng, size=32), random_labels(rng, size=32), random_images(rng, size=32),
                          0.3 * random_images(rng, size=32), ["a"], ["a"])
    discs = [trainer.disc_day, trainer.disc_night]
    gens = [trainer.relight_net, trainer.seg_net]

    # generator step
    disc_before = [_parameters(d) for d in discs]
    trainer._set_disc_trainable(False)
    trainer.opt_gen.zero_grad(set_to_none=True)
    components, _, predictions = trainer.compute_losses(batch, 0)
    generator_objective(components, cfg).backward()
    trainer.opt_gen.step()
    assert all(p.grad is None for d in discs for p in d.parameters())
    assert all(_unchanged(before, d) for before, d in zip(disc_before, discs))

    # discriminator step
    gen_before = [_parameters(g) for g in gens]
    trainer._set_disc_trainable(True)
    trainer.opt_gen.zero_grad(set_to_none=True)
    trainer.opt_disc.zero_grad(set_to_none=True)
    trainer.discriminator_loss(predictions).backward()
    trainer.opt_disc.step()
    assert all(p.grad is None for g in gens for p in g.parameters())
    assert all(_unchanged(before, g) for before, g in zip(gen_before, gens))


@pytest.mark.parametrize("seed", range(100))
def test_pseudo_labels_carry_no_gradient(seed):
    rng = np.random.default_rng(seed)
    night_logits = torch.from_numpy(rng.normal(size=(1, 4, 8, 8))).requires_grad_(True)
    mixed_logits = torch.from_numpy(rng.normal(size=(1, 4, 8, 8))).requires_grad_(True)
    y_s = torch.from_numpy(rng.integers(0, 4, size=(1, 8, 8)))
    mask = mask_from_classes(y_s, {int(rng.integers(0, 4))})
    y_m = mix_labels(y_s, torch.softmax(night_logits, dim=1), mask)
    loss_mixed_ce(torch.softmax(mixed_logits, dim=1), y_m).backward()
    assert night_logits.grad is None
    assert float(mixed_logits.grad.abs().sum()) > 0


def test_consistency_loss_has_no_gradient_into_segmentation(tiny_cfg, tiny_batch):
    trainer = BimixTrainer(tiny_cfg.replace(mode="m2f"))
    init_parameters(trainer.relight_net, rng_substream(5, "relight"))
    components, _, _ = trainer.compute_losses(tiny_batch, 0)
    components["l_m2f"].backward()
    assert all(p.grad is None for p in trainer.seg_net.parameters())
    assert any(float(p.grad.abs().sum()) > 0 for p in trainer.relight_net.parameters())


# --- Straight-line recomputation on a 4x4 fixture ---

def _tiny_conv(rng, c_in, c_out, scale=0.5):
    conv = nn.Conv2d(c_in, c_out, kernel_size=1).double()
    with torch.no_grad():
        conv.weight.copy_(torch.from_numpy(rng.uniform(-scale, scale, size=(c_out, c_in, 1, 1))))
        conv.bias.copy_(torch.from_numpy(rng.uniform(-0.1, 0.1, size=c_out)))
    return conv


def _apply(conv, x):
    w = conv.weight.detach().numpy()[:, :, 0, 0]
    b = conv.bias.detach().numpy()
    return np.einsum("oc,nchw->nohw", w, x) + b[None, :, None, None]


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _ce(p, y):
    n_classes = p.shape[1]
    picked = np.take_along_axis(p, y[:, None], axis=1)[:, 0]
    return -np.log(picked).sum() / (y.size * n_classes)


def _tv(img, res):
    d = img - res
    gx, gy = np.zeros_like(d), np.zeros_like(d)
    gx[..., :-1] = d[..., 1:] - d[..., :-1]
    gy[..., :-1, :] = d[..., 1:, :] - d[..., :-1, :]
    return np.abs(gx ** 2 + gy ** 2).mean()


def _exposure(res, en, k):
    pooled = np.zeros_like(res)
    for i in range(0, res.shape[-2], k):
        for j in range(0, res.shape[-1], k):
            pooled[..., i:i + k, j:j + k] = res[..., i:i + k, j:j + k].mean(axis=(-2, -1), keepdims=True)
    return np.abs(pooled - en).mean()


def _ssim_loss(a, b):
    def mean(x):
        return gaussian_filter(x, sigma=1.5, mode="mirror", truncate=5.0 / 1.5)
    values = []
    for n in range(a.shape[0]):
        for c in range(a.shape[1]):
            x, y = a[n, c], b[n, c]
            mu_x, mu_y = mean(x), mean(y)
            var_x, var_y, cov = mean(x * x) - mu_x ** 2, mean(y * y) - mu_y ** 2, mean(x * y) - mu_x * mu_y
            s = ((2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)) / \
                ((mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2))
            values.append(np.abs(1.0 - s))
    return 0.5 * np.mean(values)


def test_losses_match_straight_line_recomputation():
    rng = np.random.default_rng(2024)
    cfg = BimixCfg(image_size=16, pool_k=2, num_classes=3, dynamic_classes=(2,), batch_size=2, max_iters=5, seed=11,
                   eval_every=0, checkpoint_every=0, log_every=0)
    relight_net, seg_net = _tiny_conv(rng, 3, 3, scale=0.2), _tiny_conv(rng, 3, 3, scale=2.0)
    disc_day, disc_night = _tiny_conv(rng, 3, 1), _tiny_conv(rng, 3, 1)
    trainer = BimixTrainer(cfg, relight_net=relight_net, seg_net=seg_net, disc_day=disc_day, disc_night=disc_night)

    img_s, img_d = rng.uniform(size=(2, 3, 4, 4)), rng.uniform(size=(2, 3, 4, 4))
    img_n = 0.3 * rng.uniform(size=(2, 3, 4, 4))
    y_s = rng.integers(0, 3, size=(2, 4, 4))
    batch = TrainingBatch(torch.from_numpy(img_s), torch.from_numpy(y_s), torch.from_numpy(img_d),
                          torch.from_numpy(img_n), ["a", "b"], ["a", "b"])
    components, enh, _ = trainer.compute_losses(batch, 0)

    res = {k: _apply(relight_net, x) for k, x in (("s", img_s), ("d", img_d), ("n", img_n))}
    p_s, p_d, p_n = (_softmax(_apply(seg_net, x + res[k])) for k, x in (("s", img_s), ("d", img_d), ("n", img_n)))

    # translation -> segmentation
    class_rng = rng_substream(cfg.seed, "classmix", 0)
    masks = []
    for y in y_s:
        present = np.unique(y)
        chosen = class_rng.choice(present, size=int(math.ceil(present.size / 2.0)), replace=False)
        masks.append(np.isin(y, chosen))
    mask = np.stack(masks)
    mixed = np.where(mask[:, None], img_s, img_n)
    p_m = _softmax(_apply(seg_net, mixed + _apply(relight_net, mixed)))
    y_m = np.where(mask, y_s, p_n.argmax(axis=1))
    l_f2m = _ce(p_m, y_m)

    # segmentation -> translation
    dyn = p_d.argmax(axis=1) == 2
    mixed_d = np.where(dyn[:, None], img_d, img_n)
    l_m2f = np.abs(_apply(relight_net, mixed_d) - res["d"]).mean()

    l_m = _ce(p_s, y_s)
    c_star = p_d.argmax(axis=1)[:, None]
    p_day = np.take_along_axis(p_d, c_star, axis=1)[:, 0]
    p_night = np.take_along_axis(p_n, c_star, axis=1)[:, 0]
    l_ssl = np.mean((1.0 - p_day) * -np.log(p_night))

    pairs = [(img_s, res["s"]), (img_d, res["d"]), (img_n, res["n"])]
    tv = np.mean([_tv(x, r) for x, r in pairs])
    exp = np.mean([_exposure(r, r + x, 2) for x, r in pairs])
    ssim = np.mean([_ssim_loss(x, r) for x, r in pairs])
    l_enhance = 10.0 * tv + exp + ssim

    l_adv = np.mean((_apply(disc_day, p_d) - 1) ** 2) + np.mean((_apply(disc_night, p_n) - 1) ** 2)

    expected = dict(l_f2m=l_f2m, l_m2f=l_m2f, l_M=l_m, l_ssl=l_ssl, l_enhance=l_enhance, l_adv=l_adv)
    for key, value in expected.items():
        assert float(components[key]) == pytest.approx(value, rel=1e-7, abs=1e-10), key
    assert float(enh.tv) == pytest.approx(tv, rel=1e-7)
    assert float(enh.exp) == pytest.approx(exp, rel=1e-7)
    assert float(enh.ssim) == pytest.approx(ssim, rel=1e-7)


# --- Loops ---

def test_pretrain_zero_iterations_is_initialization(tiny_cfg, tiny_dataset):
    cfg = tiny_cfg.replace(pretrain_iters=0)
    source = SyntheticSceneLoader(tiny_dataset).source()
    checkpoint = pretrain(BimixTrainer(cfg), source)
    fresh = Checkpoint.from_trainer(BimixTrainer(cfg), "pretrain")
    assert checkpoint.iteration == 0
    for name, array in fresh.arrays.items():
        assert np.array_equal(checkpoint.arrays[name], array)


def test_pretrain_empty_source(tiny_cfg):
    empty = LabeledSet(images=torch.zeros(0, 3, 32, 32), labels=torch.zeros(0, 32, 32, dtype=torch.int64), names=[])
    with pytest.raises(DataError):
        pretrain(BimixTrainer(tiny_cfg), empty)


def test_pretrain_determinism(tiny_cfg, tiny_dataset):
    source = SyntheticSceneLoader(tiny_dataset).source()
    first, second = (pretrain(BimixTrainer(tiny_cfg), source) for _ in range(2))
    for name, array in first.arrays.items():
        assert np.array_equal(second.arrays[name], array)


def test_pretrain_resume(tiny_cfg, tiny_dataset, tmp_path):
    cfg = tiny_cfg.replace(pretrain_iters=4, checkpoint_every=2)
    source = SyntheticSceneLoader(tiny_dataset).source()
    full = pretrain(BimixTrainer(cfg), source)

    with pytest.raises(KeyboardInterrupt):
        pretrain(BimixTrainer(cfg), source, metrics_writer=ListWriter(stop_at=3), checkpoint_dir=tmp_path)
    last = Checkpoint.load(tmp_path / "last")
    assert last.iteration == 2
    resumed = pretrain(BimixTrainer(cfg), source, checkpoint=last)
    for name, array in full.arrays.items():
        assert np.array_equal(resumed.arrays[name], array)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pretrain_reduces_loss(tiny_dataset, seed):
    cfg = BimixCfg(image_size=32, pool_k=16, pretrain_iters=200, pretrain_lr=0.05, seed=seed, log_every=0)
    writer = ListWriter()
    pretrain(BimixTrainer(cfg), SyntheticSceneLoader(tiny_dataset).source(), metrics_writer=writer)
    losses = [line["l_M"] for line in writer.lines]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def _pretrain_checkpoint(cfg):
    return Checkpoint.from_trainer(BimixTrainer(cfg), "pretrain")


def test_adapt_resume_continues_identically(tiny_cfg, tiny_dataset, tmp_path):
    cfg = tiny_cfg.replace(max_iters=6, checkpoint_every=3)
    loader = SyntheticSceneLoader(tiny_dataset)
    source, target = loader.source(), loader.pairs()
    start = _pretrain_checkpoint(cfg)

    full = ListWriter()
    adapt(BimixTrainer(cfg), source, target, checkpoint=start, metrics_writer=full)

    interrupted = ListWriter(stop_at=4)
    with pytest.raises(KeyboardInterrupt):
        adapt(BimixTrainer(cfg), source, target, checkpoint=start, metrics_writer=interrupted,
              checkpoint_dir=tmp_path)
    last = Checkpoint.load(tmp_path / "last")
    assert last.iteration == 3

    resumed = ListWriter()
    final = adapt(BimixTrainer(cfg), source, target, checkpoint=last, metrics_writer=resumed)
    assert final.iteration == 6
    assert resumed.lines == full.lines[3:]


def test_adapt_digest_checks(tiny_cfg, tiny_dataset):
    loader = SyntheticSceneLoader(tiny_dataset)
    source, target = loader.source(), loader.pairs()
    cfg = tiny_cfg.replace(max_iters=2)
    resumable = adapt(BimixTrainer(cfg.replace(max_iters=1)), source, target, checkpoint=_pretrain_checkpoint(cfg))
    assert resumable.phase == "adapt"
    with pytest.raises(CheckpointError):
        adapt(BimixTrainer(cfg), source, target, checkpoint=resumable)
    result = adapt(BimixTrainer(cfg), source, target, checkpoint=resumable, allow_digest_mismatch=True)
    assert result.iteration == 2

    other_model = _pretrain_checkpoint(cfg.replace(num_classes=6, dynamic_classes=(4, 5)))
    with pytest.raises(CheckpointError):
        adapt(BimixTrainer(cfg), source, target, checkpoint=other_model)


def test_adapt_writes_snapshots(tiny_cfg, tiny_dataset, tmp_path):
    loader = SyntheticSceneLoader(tiny_dataset)
    cfg = tiny_cfg.replace(max_iters=4, eval_every=2)
    snapshots = ListWriter()
    adapt(BimixTrainer(cfg), loader.source(), loader.pairs(), checkpoint=_pretrain_checkpoint(cfg),
          val=loader.evaluation("val"), eval_writer=snapshots, checkpoint_dir=tmp_path)
    assert [s["iter"] for s in snapshots.lines] == [2, 4]
    assert all(0.0 <= s["miou"] <= 1.0 for s in snapshots.lines)
    assert (tmp_path / "best" / "snapshot.json").is_file()


def test_step_report_as_dict():
    components = dict(l_enhance=1.0, l_M=2.0, l_D=0.5, l_adv=0.25, l_f2m=0.0, l_m2f=0.0, l_ssl=1.0)
    report = StepReport.from_losses(4, 0.01, components, dict(tv=0.1, exp=0.2, ssim=0.3), BimixCfg(mode="baseline"))
    content = report.as_dict()
    assert content["iter"] == 4 and content["l_tv"] == 0.1 and content["total"] == 4.75
