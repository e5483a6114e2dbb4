# -*- coding: utf-8 -*-

"""
Configuration, learning rate schedule, the bidirectional mixing training step and
the pretraining / adaptation loops
"""

import copy
import json
from pathlib import Path
from collections import OrderedDict
from typing import NamedTuple, List

import yaml
import numpy as np
import torch
from tqdm import tqdm
from loguru import logger
from omegaconf import OmegaConf
from cached_property import cached_property

from ._errors import ScheduleRangeError, PairingError, CheckpointError, DataError
from ._utils import get_yaml_cfg, rng_substream, json_digest
from ._imgcore import argmax_confidence
from ._checkpoint import Checkpoint
from .mixing import classmix_masks, dynamic_mask, mix_images, mix_labels
from .enhancement import RelightNet, EnhancementLossReport, enhance, relight, enhancement_report, \
    loss_consistency
from .segmentation import SegNet, seg_forward, loss_ce, loss_mixed_ce, loss_focal_ssl
from .adversarial import Discriminator, disc_forward, loss_adv_gen, loss_disc, MIN_INPUT_SIZE
from .evaluation import evaluate_networks

ABLATION_MODES = ("baseline", "m2f", "f2m", "bimix")

# Keys of one metrics line, in output order
REPORT_KEYS = ("iter", "lr", "l_enhance", "l_tv", "l_exp", "l_ssim", "l_M", "l_adv", "l_D",
               "l_f2m", "l_m2f", "l_ssl", "total")

COMPONENT_KEYS = ("l_enhance", "l_M", "l_D", "l_adv", "l_f2m", "l_m2f", "l_ssl")


class BimixCfg(object):

    # Fields that change the shape of network parameters
    MODEL_FIELDS = ("num_classes", "image_size")

    def __init__(self, mu1=0.001, mu2=0.001, mu3=1.0, lambda_adv=1.0, alpha_tv=10.0, alpha_exp=1.0, alpha_ssim=1.0,
                 gamma=1.0, pool_k=32, base_lr=2.5e-4, pretrain_lr=None, disc_lr=1e-4, lr_power=0.9, momentum=0.9,
                 weight_decay=5e-4, adam_betas=(0.9, 0.99), batch_size=2, max_iters=3000, pretrain_iters=1500,
                 mode="bimix", relight_enabled=True, seed=0, image_size=96, num_classes=8,
                 dynamic_classes=(4, 5), eval_every=500, checkpoint_every=1000, log_every=50,
                 loader="SyntheticSceneLoader"):
        """
        Settings of the pretraining and adaptation phases.
        :param mu1: weight of the translation -> segmentation mixing loss
        :param mu2: weight of the segmentation -> translation consistency loss
        :param mu3: weight of the focal self-supervised loss
        :param lambda_adv: weight of the generator-side adversarial loss
        :param alpha_tv: weight of the total variation loss
        :param alpha_exp: weight of the exposure loss
        :param alpha_ssim: weight of the structural similarity loss
        :param gamma: focal exponent
        :param pool_k: pooling window of the exposure loss
        :param base_lr: initial learning rate of the relighting and segmentation networks
        :param pretrain_lr: initial learning rate of the source-only pretraining (base_lr if None)
        :param disc_lr: initial learning rate of the discriminators
        :param lr_power: exponent of the polynomial schedule
        :param momentum: SGD momentum
        :param weight_decay: SGD weight decay
        :param adam_betas: Adam betas of the discriminator optimizer
        :param batch_size: number of source images and of day/night pairs per step
        :param max_iters: number of adaptation steps
        :param pretrain_iters: number of source-only steps
        :param mode: one of baseline, m2f, f2m, bimix
        :param relight_enabled: use the relighting network (False: images pass unchanged)
        :param seed: experiment seed
        :param image_size: square image size in pixels
        :param num_classes: number of classes C
        :param dynamic_classes: class ids pasted by the segmentation -> translation direction
        :param eval_every: adaptation steps between validation snapshots (0: never)
        :param checkpoint_every: adaptation steps between resumable checkpoints (0: never)
        :param log_every: steps between log messages
        :param loader: name of the dataset loader class in bimix_toolbox._dataset
        """

        # --- Loss weights ---
        self.mu1 = float(mu1)
        self.mu2 = float(mu2)
        self.mu3 = float(mu3)
        self.lambda_adv = float(lambda_adv)
        self.alpha_tv = float(alpha_tv)
        self.alpha_exp = float(alpha_exp)
        self.alpha_ssim = float(alpha_ssim)
        self.gamma = float(gamma)
        self.pool_k = int(pool_k)

        # --- Optimization ---
        self.base_lr = float(base_lr)
        self.pretrain_lr = float(base_lr if pretrain_lr is None else pretrain_lr)
        self.disc_lr = float(disc_lr)
        self.lr_power = float(lr_power)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.adam_betas = tuple(float(b) for b in adam_betas)
        self.batch_size = int(batch_size)
        self.max_iters = int(max_iters)
        self.pretrain_iters = int(pretrain_iters)

        # --- Ablation ---
        self.mode = str(mode)
        self.relight_enabled = bool(relight_enabled)

        # --- Data & model ---
        self.seed = int(seed)
        self.image_size = int(image_size)
        self.num_classes = int(num_classes)
        self.dynamic_classes = tuple(int(c) for c in dynamic_classes)
        self.loader = str(loader)

        # --- Bookkeeping ---
        self.eval_every = int(eval_every)
        self.checkpoint_every = int(checkpoint_every)
        self.log_every = int(log_every)

        self._validate()

    def _validate(self):
        weights = dict(mu1=self.mu1, mu2=self.mu2, mu3=self.mu3, lambda_adv=self.lambda_adv, alpha_tv=self.alpha_tv,
                       alpha_exp=self.alpha_exp, alpha_ssim=self.alpha_ssim, gamma=self.gamma)
        negative = ["%s=%g" % (name, value) for name, value in weights.items() if value < 0]
        if negative:
            raise ValueError("Loss weights must be non-negative: %s" % ", ".join(negative))
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1 (got %d)" % self.max_iters)
        if self.pretrain_iters < 0:
            raise ValueError("pretrain_iters must be >= 0 (got %d)" % self.pretrain_iters)
        if self.mode not in ABLATION_MODES:
            msg = "Unknown mode: %s (known modes: %s)" % (self.mode, ", ".join(ABLATION_MODES))
            raise ValueError(msg)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 (got %d)" % self.batch_size)
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (got %d)" % self.num_classes)
        invalid = [c for c in self.dynamic_classes if not 0 <= c < self.num_classes]
        if invalid:
            raise ValueError("dynamic classes %s outside [0, %d)" % (str(invalid), self.num_classes))
        if self.image_size < MIN_INPUT_SIZE:
            raise ValueError("image_size must be >= %d (got %d)" % (MIN_INPUT_SIZE, self.image_size))
        if self.image_size % self.pool_k != 0:
            logger.warning("image_size %d is not a multiple of pool_k %d" % (self.image_size, self.pool_k))

    @classmethod
    def from_cfg(cls, yaml_filepath, **kwargs):
        """
        Initialize the BimixCfg instance from a flat yaml config file. Keyword
        arguments override the file values.
        :param yaml_filepath:
        :return: BimixCfg
        """
        cfg = OmegaConf.to_container(get_yaml_cfg(yaml_filepath))
        cfg.update(kwargs)
        return cls(**cfg)

    @classmethod
    def preset(cls, name, **kwargs):
        """
        Return defined presets. Keyword arguments override the preset values.
        :param name: (str) Name of the preset (`desk` or `full`)
        :return: BimixCfg
        """

        valid_presets = ["desk", "full"]

        # Small images, from-scratch networks on a CPU
        # -> larger learning rates, few thousand iterations
        # -> adversarial term scaled down against the class-normalized cross-entropy
        if str(name) == "desk":
            keyw = dict(lambda_adv=0.001, base_lr=0.005, pretrain_lr=0.05, disc_lr=1e-4, max_iters=3000,
                        pretrain_iters=1500)

        # Iteration counts and learning rates of the full-scale protocol
        elif str(name) == "full":
            keyw = dict(base_lr=2.5e-4, pretrain_lr=2.5e-4, disc_lr=1e-4, max_iters=100000, pretrain_iters=150000,
                        eval_every=5000, checkpoint_every=5000)

        else:
            msg = "Unknown preset: %s (known presets: %s)" % (str(name), ", ".join(valid_presets))
            raise ValueError(msg)

        keyw.update(kwargs)
        return cls(**keyw)

    def replace(self, **kwargs):
        """ Return a copy with some fields replaced """
        keyw = self.to_dict()
        keyw.update(kwargs)
        return BimixCfg(**keyw)

    def to_dict(self):
        return OrderedDict((
            ("mu1", self.mu1), ("mu2", self.mu2), ("mu3", self.mu3), ("lambda_adv", self.lambda_adv),
            ("alpha_tv", self.alpha_tv), ("alpha_exp", self.alpha_exp), ("alpha_ssim", self.alpha_ssim),
            ("gamma", self.gamma), ("pool_k", self.pool_k),
            ("base_lr", self.base_lr), ("pretrain_lr", self.pretrain_lr), ("disc_lr", self.disc_lr),
            ("lr_power", self.lr_power), ("momentum", self.momentum), ("weight_decay", self.weight_decay),
            ("adam_betas", list(self.adam_betas)), ("batch_size", self.batch_size),
            ("max_iters", self.max_iters), ("pretrain_iters", self.pretrain_iters),
            ("mode", self.mode), ("relight_enabled", self.relight_enabled),
            ("seed", self.seed), ("image_size", self.image_size), ("num_classes", self.num_classes),
            ("dynamic_classes", list(self.dynamic_classes)), ("loader", self.loader),
            ("eval_every", self.eval_every), ("checkpoint_every", self.checkpoint_every),
            ("log_every", self.log_every)))

    def save(self, filepath):
        """ Write the configuration as flat yaml """
        with open(str(filepath), "w") as f:
            yaml.safe_dump(dict(self.to_dict()), f, sort_keys=False)

    @cached_property
    def digest(self):
        return json_digest(self.to_dict())

    @cached_property
    def model_digest(self):
        content = self.to_dict()
        return json_digest({key: content[key] for key in self.MODEL_FIELDS})

    @property
    def alpha(self):
        return self.alpha_tv, self.alpha_exp, self.alpha_ssim

    def branch_active(self, branch):
        """
        A mixing branch runs if the mode includes it and its weight is positive.
        Inactive branches draw no random numbers.
        :param branch: (str) `f2m` or `m2f`
        :return: bool
        """
        if branch == "f2m":
            return self.mode in ("f2m", "bimix") and self.mu1 > 0
        elif branch == "m2f":
            return self.mode in ("m2f", "bimix") and self.mu2 > 0
        raise ValueError("Unknown branch: %s" % str(branch))


def poly_lr(iteration, base, max_iters, power=0.9):
    """
    Polynomial learning rate decay
    :param iteration: (int) step index in [0, max_iters]
    :param base: initial learning rate
    :param max_iters: number of steps of the schedule
    :param power: decay exponent
    :return: float
    """
    if not 0 <= iteration <= max_iters:
        raise ScheduleRangeError("iteration %d outside schedule [0, %d]" % (iteration, max_iters))
    return base * (1.0 - float(iteration) / float(max_iters)) ** power


def generator_objective(components, cfg):
    """
    The part of the total objective that updates the relighting and segmentation
    networks (everything but the discriminator loss)
    :param components: dict with the COMPONENT_KEYS (floats or tensors)
    :param cfg: BimixCfg
    :return: float or scalar tensor
    """
    total = components["l_enhance"] + components["l_M"] + cfg.lambda_adv * components["l_adv"] \
        + cfg.mu3 * components["l_ssl"]
    if cfg.branch_active("f2m"):
        total = total + cfg.mu1 * components["l_f2m"]
    if cfg.branch_active("m2f"):
        total = total + cfg.mu2 * components["l_m2f"]
    return total


def total_objective(components, cfg):
    """
    Weighted sum of all loss components. Mixing terms of inactive branches are absent.
    :param components: dict with the COMPONENT_KEYS (floats or tensors)
    :param cfg: BimixCfg
    :return: float or scalar tensor
    """
    return generator_objective(components, cfg) + components["l_D"]


def _scalar(value):
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


class StepReport(object):
    """
    Scalars of one adaptation step
    """

    def __init__(self, iteration, lr, components, enhancement, total):
        """
        :param iteration: (int) step index
        :param lr: learning rate of the generator step
        :param components: dict of python floats with the COMPONENT_KEYS
        :param enhancement: dict of python floats with tv/exp/ssim
        :param total: weighted total objective
        """
        self.iteration = int(iteration)
        self.lr = float(lr)
        self.components = dict(components)
        self.enhancement = dict(enhancement)
        self.total = float(total)

    @classmethod
    def from_losses(cls, iteration, lr, components, enhancement, cfg):
        components = {key: _scalar(components[key]) for key in COMPONENT_KEYS}
        enhancement = {key: float(enhancement[key]) for key in ("tv", "exp", "ssim")}
        return cls(iteration, lr, components, enhancement, total_objective(components, cfg))

    def recombine(self, cfg):
        """ Total recomputed from the reported components """
        return total_objective(self.components, cfg)

    def as_dict(self):
        c, e = self.components, self.enhancement
        values = (self.iteration, self.lr, c["l_enhance"], e["tv"], e["exp"], e["ssim"], c["l_M"], c["l_adv"],
                  c["l_D"], c["l_f2m"], c["l_m2f"], c["l_ssl"], self.total)
        return OrderedDict(zip(REPORT_KEYS, values))

    def __repr__(self):
        return "StepReport(%s)" % ", ".join("%s=%.6g" % (k, v) for k, v in self.as_dict().items())


class TrainingBatch(NamedTuple):
    source_images: torch.Tensor
    source_labels: torch.Tensor
    day_images: torch.Tensor
    night_images: torch.Tensor
    day_names: List[str]
    night_names: List[str]

    def check_pairing(self):
        if self.day_images.shape != self.night_images.shape:
            msg = "day batch {} and night batch {} differ in shape"
            raise PairingError(msg.format(tuple(self.day_images.shape), tuple(self.night_images.shape)))
        if list(self.day_names) != list(self.night_names):
            raise PairingError("unpaired day/night batch: %s vs %s" % (self.day_names, self.night_names))


class BatchSampler(object):
    """
    Deterministic epoch-wise shuffling of a dataset. The order of epoch k is drawn
    from the `data/<split>/epoch<k>` stream, so the batch of any iteration can be
    computed without replaying the previous ones.
    """

    def __init__(self, size, batch_size, seed, split):
        if size < 1:
            raise DataError("cannot sample batches from an empty %s set" % split)
        self.size = int(size)
        self.batch_size = int(batch_size)
        self.seed = seed
        self.split = split
        self._permutations = OrderedDict()

    def _permutation(self, epoch):
        if epoch not in self._permutations:
            rng = rng_substream(self.seed, "data", self.split, "epoch%d" % epoch)
            self._permutations[epoch] = rng.permutation(self.size)
            while len(self._permutations) > 2:
                self._permutations.popitem(last=False)
        return self._permutations[epoch]

    def indices(self, iteration):
        positions = iteration * self.batch_size + np.arange(self.batch_size)
        return [int(self._permutation(int(pos // self.size))[pos % self.size]) for pos in positions]


class JsonLinesWriter(object):
    """ Append one json object per line, flushed after every write """

    def __init__(self, filepath, append=False):
        self.filepath = Path(filepath)
        self._fileobj = open(str(self.filepath), "a" if append else "w")

    def write(self, content):
        self._fileobj.write(json.dumps(content) + "\n")
        self._fileobj.flush()

    def close(self):
        self._fileobj.close()

    def __enter__(self):
        return self

    def __exit__(self, *args):
        self.close()


class BimixTrainer(object):
    """
    Holds the relighting network F, the segmentation network M, the day and night
    discriminators and their optimizers, and performs the training steps
    """

    def __init__(self, cfg, relight_net=None, seg_net=None, disc_day=None, disc_night=None):
        """
        Networks not given are created and initialized from the `init/<net>` streams
        :param cfg: BimixCfg
        """
        self.cfg = cfg
        seed = cfg.seed
        self.relight_net = relight_net if relight_net is not None else \
            RelightNet(rng=rng_substream(seed, "init", "relight"))
        self.seg_net = seg_net if seg_net is not None else \
            SegNet(cfg.num_classes, rng=rng_substream(seed, "init", "seg"))
        self.disc_day = disc_day if disc_day is not None else \
            Discriminator(cfg.num_classes, rng=rng_substream(seed, "init", "disc_day"))
        self.disc_night = disc_night if disc_night is not None else \
            Discriminator(cfg.num_classes, rng=rng_substream(seed, "init", "disc_night"))

        gen_params = list(self.relight_net.parameters()) + list(self.seg_net.parameters())
        self.opt_gen = torch.optim.SGD(gen_params, lr=cfg.base_lr, momentum=cfg.momentum,
                                       weight_decay=cfg.weight_decay)
        disc_params = list(self.disc_day.parameters()) + list(self.disc_night.parameters())
        self.opt_disc = torch.optim.Adam(disc_params, lr=cfg.disc_lr, betas=cfg.adam_betas)
        self.opt_pretrain = torch.optim.SGD(self.seg_net.parameters(), lr=cfg.pretrain_lr, momentum=cfg.momentum,
                                            weight_decay=cfg.weight_decay)
        self.iteration = 0

    def networks(self):
        return OrderedDict((("relight", self.relight_net), ("seg", self.seg_net),
                            ("disc_day", self.disc_day), ("disc_night", self.disc_night)))

    def optimizers(self):
        return OrderedDict((("opt_gen", self.opt_gen), ("opt_disc", self.opt_disc),
                            ("opt_pretrain", self.opt_pretrain)))

    def _enhance(self, img):
        if not self.cfg.relight_enabled:
            return torch.zeros_like(img), img
        return enhance(self.relight_net, img)

    def _relight(self, img):
        if not self.cfg.relight_enabled:
            return torch.zeros_like(img)
        return relight(self.relight_net, img)

    def _set_disc_trainable(self, flag):
        for disc in (self.disc_day, self.disc_night):
            for param in disc.parameters():
                param.requires_grad_(flag)

    @staticmethod
    def _set_lr(optimizer, lr):
        for group in optimizer.param_groups:
            group["lr"] = lr

    def compute_losses(self, batch, iteration):
        """
        Forward pass of one adaptation step (steps 1 to 5)
        :param batch: TrainingBatch
        :param iteration: (int) step index, keys the class sampling stream
        :return: (components dict of tensors, EnhancementLossReport, detached predictions)
        """
        cfg = self.cfg
        img_s, y_s, img_d, img_n = batch.source_images, batch.source_labels, batch.day_images, batch.night_images

        # (1) enhance the three domain images
        res_s, en_s = self._enhance(img_s)
        res_d, en_d = self._enhance(img_d)
        res_n, en_n = self._enhance(img_n)

        # (2) segment the enhanced images
        p_s, p_d, p_n = seg_forward(self.seg_net, en_s), seg_forward(self.seg_net, en_d), \
            seg_forward(self.seg_net, en_n)

        zero = torch.zeros((), dtype=p_s.dtype)

        # (3) translation -> segmentation: source classes pasted onto night
        if cfg.branch_active("f2m"):
            rng = rng_substream(cfg.seed, "classmix", iteration)
            mask_fm, _ = classmix_masks(y_s, rng)
            _, en_m = self._enhance(mix_images(img_s, img_n, mask_fm))
            p_m = seg_forward(self.seg_net, en_m)
            l_f2m = loss_mixed_ce(p_m, mix_labels(y_s, p_n, mask_fm))
        else:
            l_f2m = zero

        # (4) segmentation -> translation: day dynamic objects pasted onto night
        if cfg.branch_active("m2f") and cfg.relight_enabled:
            mask_mf = dynamic_mask(argmax_confidence(p_d.detach()), cfg.dynamic_classes)
            res_m = self._relight(mix_images(img_d, img_n, mask_mf))
            l_m2f = loss_consistency(res_m, res_d)
        else:
            l_m2f = zero

        # (5) supervised, self-supervised, enhancement and adversarial losses
        l_m = loss_ce(p_s, y_s)
        l_ssl = loss_focal_ssl(p_d, p_n, gamma=cfg.gamma)
        if cfg.relight_enabled:
            enh = enhancement_report([(img_s, res_s), (img_d, res_d), (img_n, res_n)], alpha=cfg.alpha,
                                     pool_k=cfg.pool_k)
        else:
            enh = EnhancementLossReport.zeros(alpha=cfg.alpha)
        l_adv = loss_adv_gen(disc_forward(self.disc_day, p_d), disc_forward(self.disc_night, p_n))

        components = dict(l_enhance=enh.total, l_M=l_m, l_adv=l_adv, l_f2m=l_f2m, l_m2f=l_m2f, l_ssl=l_ssl)
        predictions = (p_s.detach(), p_d.detach(), p_n.detach())
        return components, enh, predictions

    def discriminator_loss(self, predictions):
        """ Discriminator loss on detached (source, day, night) predictions """
        p_s, p_d, p_n = predictions
        return loss_disc(disc_forward(self.disc_day, p_s), disc_forward(self.disc_night, p_s),
                         disc_forward(self.disc_day, p_d), disc_forward(self.disc_night, p_n))

    def train_step(self, batch):
        """
        One adaptation step: generator update of F and M, then discriminator update
        :param batch: TrainingBatch
        :return: StepReport
        """
        cfg = self.cfg
        if self.iteration >= cfg.max_iters:
            raise ScheduleRangeError("iteration %d >= max_iters %d" % (self.iteration, cfg.max_iters))
        batch.check_pairing()

        lr = poly_lr(self.iteration, cfg.base_lr, cfg.max_iters, cfg.lr_power)
        self._set_lr(self.opt_gen, lr)
        self._set_lr(self.opt_disc, poly_lr(self.iteration, cfg.disc_lr, cfg.max_iters, cfg.lr_power))

        # (6) generator step, discriminators are constant
        self._set_disc_trainable(False)
        self.opt_gen.zero_grad(set_to_none=True)
        components, enh, predictions = self.compute_losses(batch, self.iteration)
        generator_objective(components, cfg).backward()
        self.opt_gen.step()

        # (7) discriminator step on detached predictions
        self._set_disc_trainable(True)
        self.opt_disc.zero_grad(set_to_none=True)
        l_disc = self.discriminator_loss(predictions)
        l_disc.backward()
        self.opt_disc.step()

        components["l_D"] = l_disc.detach()
        report = StepReport.from_losses(self.iteration, lr, components, enh.as_floats(), cfg)
        self.iteration += 1
        return report

    def pretrain_step(self, images, labels):
        """
        One source-only supervised step of the segmentation network on raw images
        :return: (float) cross-entropy before the update
        """
        cfg = self.cfg
        lr = poly_lr(self.iteration, cfg.pretrain_lr, cfg.pretrain_iters, cfg.lr_power)
        self._set_lr(self.opt_pretrain, lr)
        self.opt_pretrain.zero_grad(set_to_none=True)
        loss = loss_ce(seg_forward(self.seg_net, images), labels)
        loss.backward()
        self.opt_pretrain.step()
        self.iteration += 1
        return float(loss.detach())

    def frozen_copy(self):
        """ Read-only copy of the relighting and segmentation networks for evaluation """
        relight_net, seg_net = copy.deepcopy(self.relight_net), copy.deepcopy(self.seg_net)
        for net in (relight_net, seg_net):
            net.eval()
            for param in net.parameters():
                param.requires_grad_(False)
        return relight_net, seg_net


def make_batch(source, target, source_indices, pair_indices):
    """
    Assemble a training batch from in-memory datasets
    :param source: labeled source set (images, labels, names)
    :param target: paired target set (day, night, names)
    :return: TrainingBatch
    """
    names = [target.names[i] for i in pair_indices]
    return TrainingBatch(source_images=source.images[source_indices],
                         source_labels=source.labels[source_indices],
                         day_images=target.day[pair_indices],
                         night_images=target.night[pair_indices],
                         day_names=names, night_names=list(names))


def pretrain(trainer, source, checkpoint=None, metrics_writer=None, checkpoint_dir=None, progress=False):
    """
    Source-only supervised training of the segmentation network
    :param trainer: BimixTrainer
    :param source: labeled source set with `images`, `labels`
    :param checkpoint: optional pretrain checkpoint to resume from
    :param metrics_writer: object with a `write(dict)` method receiving {iter, lr, l_M}
    :param checkpoint_dir: directory for the periodic `last` checkpoint
    :param progress: (bool) show a progress bar
    :return: Checkpoint
    """
    cfg = trainer.cfg
    if len(source) == 0:
        raise DataError("the source set is empty")

    if checkpoint is not None:
        if checkpoint.phase != "pretrain":
            raise CheckpointError("cannot resume pretraining from a %s checkpoint" % checkpoint.phase)
        _check_digest(checkpoint.config_digest, cfg.digest, "config", allow_mismatch=False)
        checkpoint.apply_to(trainer, load_optimizers=True)
        trainer.iteration = checkpoint.iteration
        logger.info("Resuming pretraining at iteration %d" % trainer.iteration)

    sampler = BatchSampler(len(source), cfg.batch_size, cfg.seed, "source")
    for iteration in tqdm(range(trainer.iteration, cfg.pretrain_iters), desc="pretrain", disable=not progress):
        indices = sampler.indices(iteration)
        lr = poly_lr(iteration, cfg.pretrain_lr, cfg.pretrain_iters, cfg.lr_power)
        loss = trainer.pretrain_step(source.images[indices], source.labels[indices])
        if metrics_writer is not None:
            metrics_writer.write(OrderedDict((("iter", iteration), ("lr", lr), ("l_M", loss))))
        if cfg.log_every > 0 and iteration % cfg.log_every == 0:
            logger.info("pretrain iter %6d  lr %.3e  l_M %.5f" % (iteration, lr, loss))
        done = iteration + 1
        if checkpoint_dir is not None and cfg.checkpoint_every > 0 and done % cfg.checkpoint_every == 0:
            Checkpoint.from_trainer(trainer, "pretrain").save(Path(checkpoint_dir) / "last")

    return Checkpoint.from_trainer(trainer, "pretrain")


def _check_digest(found, expected, label, allow_mismatch):
    if found == expected:
        return
    msg = "%s digest mismatch: checkpoint %s vs current %s" % (label, found[:12], expected[:12])
    if not allow_mismatch:
        raise CheckpointError(msg)
    logger.warning(msg + " (ignored)")


def adapt(trainer, source, target, checkpoint=None, val=None, metrics_writer=None, eval_writer=None,
          checkpoint_dir=None, allow_digest_mismatch=False, progress=False):
    """
    Domain adaptation loop. A pretrain checkpoint initializes the networks (its model
    digest must match), an adapt checkpoint resumes the loop (its full config digest
    must match).
    :param trainer: BimixTrainer
    :param source: labeled source set
    :param target: paired day/night set
    :param checkpoint: pretrain or adapt Checkpoint
    :param val: optional labeled night set for evaluation snapshots
    :param metrics_writer: receives one StepReport dict per step
    :param eval_writer: receives one snapshot dict per evaluation
    :param checkpoint_dir: directory for the periodic `last` and the `best` checkpoints
    :param allow_digest_mismatch: warn instead of raising on digest mismatch
    :param progress: (bool) show a progress bar
    :return: Checkpoint of the final state
    """
    cfg = trainer.cfg
    if checkpoint is not None:
        if checkpoint.phase == "adapt":
            _check_digest(checkpoint.config_digest, cfg.digest, "config", allow_digest_mismatch)
            checkpoint.apply_to(trainer, load_optimizers=True)
            trainer.iteration = checkpoint.iteration
            logger.info("Resuming adaptation at iteration %d" % trainer.iteration)
        else:
            _check_digest(checkpoint.model_digest, cfg.model_digest, "model", allow_digest_mismatch)
            checkpoint.apply_to(trainer, load_optimizers=False)
            trainer.iteration = 0

    source_sampler = BatchSampler(len(source), cfg.batch_size, cfg.seed, "source")
    target_sampler = BatchSampler(len(target), cfg.batch_size, cfg.seed, "target")
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    best_miou = _previous_best(checkpoint_dir)

    for iteration in tqdm(range(trainer.iteration, cfg.max_iters), desc="adapt", disable=not progress):
        batch = make_batch(source, target, source_sampler.indices(iteration), target_sampler.indices(iteration))
        report = trainer.train_step(batch)
        if metrics_writer is not None:
            metrics_writer.write(report.as_dict())
        if cfg.log_every > 0 and iteration % cfg.log_every == 0:
            logger.info("adapt iter %6d  lr %.3e  total %.5f  l_M %.5f  l_ssl %.5f" % (
                iteration, report.lr, report.total, report.components["l_M"], report.components["l_ssl"]))

        done = iteration + 1
        if val is not None and cfg.eval_every > 0 and done % cfg.eval_every == 0:
            snapshot = evaluation_snapshot(trainer, val)
            logger.info("eval  iter %6d  mIoU %.4f  pixel acc %.4f" % (done, snapshot["miou"],
                                                                        snapshot["pixel_accuracy"]))
            if eval_writer is not None:
                eval_writer.write(snapshot)
            if snapshot["miou"] > best_miou:
                best_miou = snapshot["miou"]
                if checkpoint_dir is not None:
                    Checkpoint.from_trainer(trainer, "adapt").save(checkpoint_dir / "best")
                    with open(str(checkpoint_dir / "best" / "snapshot.json"), "w") as f:
                        json.dump(snapshot, f, indent=2)

        if checkpoint_dir is not None and cfg.checkpoint_every > 0 and done % cfg.checkpoint_every == 0:
            Checkpoint.from_trainer(trainer, "adapt").save(checkpoint_dir / "last")

    return Checkpoint.from_trainer(trainer, "adapt")


def _previous_best(checkpoint_dir):
    if checkpoint_dir is None:
        return -np.inf
    snapshot_path = checkpoint_dir / "best" / "snapshot.json"
    if not snapshot_path.is_file():
        return -np.inf
    with open(str(snapshot_path), "r") as f:
        return float(json.load(f)["miou"])


def evaluation_snapshot(trainer, val):
    """
    mIoU and pixel accuracy of the current networks on a labeled night set,
    computed on a frozen copy of the parameters
    :return: OrderedDict {iter, miou, pixel_accuracy}
    """
    relight_net, seg_net = trainer.frozen_copy()
    cm = evaluate_networks(seg_net, relight_net, val.images, val.labels, trainer.cfg.num_classes,
                           relight_enabled=trainer.cfg.relight_enabled)
    _, mean_iou = cm.miou()
    return OrderedDict((("iter", trainer.iteration), ("miou", mean_iou), ("pixel_accuracy", cm.pixel_accuracy())))
