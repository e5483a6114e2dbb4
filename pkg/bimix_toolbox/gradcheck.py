# -*- coding: utf-8 -*-

"""
Central finite-difference check of the analytic gradients of every training loss,
evaluated in 64-bit on small random instances. The enhancement losses are checked
a second time against all parameters of a relighting network on 16x16 images,
along random directions of parameter space.
"""

from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch.nn.utils import parameters_to_vector, vector_to_parameters
from loguru import logger

from ._utils import rng_substream, init_parameters
from ._imgcore import IGNORE_ID
from .mixing import sample_half_classes, mask_from_classes, mix_labels
from .enhancement import RelightNet, relight, loss_tv, loss_exposure, loss_ssim, loss_consistency
from .segmentation import loss_ce, loss_mixed_ce, loss_focal_ssl
from .adversarial import loss_adv_gen, loss_disc

INPUT_LOSSES = ("ce", "mixed_ce", "focal", "tv", "exp", "ssim", "consistency", "adv", "disc")
NET_LOSSES = ("net_tv", "net_exp", "net_ssim", "net_consistency")
GRADCHECK_LOSSES = INPUT_LOSSES + NET_LOSSES

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-3
DEFAULT_SEEDS = (0, 1, 2, 3, 4)

# size of the random instances
NUM_CLASSES = 4
SIZE = 8
POOL_K = 4

# relighting network instances
NET_SIZE = 16
NET_POOL_K = 8
NET_DIRECTIONS = 8


class GradCheckResult(NamedTuple):
    loss: str
    seed: int
    rel_err: float
    passed: bool


class FlippedGradient(torch.autograd.Function):
    """ Identity in the forward pass, negated gradient in the backward pass """

    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -grad_output


def _tensor(rng, *shape, low=0.0, high=1.0):
    return torch.from_numpy(rng.uniform(low, high, size=shape)).to(torch.float64)


def _labels(rng, num_classes=NUM_CLASSES, ignore_fraction=0.1):
    y = rng.integers(0, num_classes, size=(1, SIZE, SIZE))
    y[rng.random(size=y.shape) < ignore_fraction] = IGNORE_ID
    return torch.from_numpy(y).to(torch.int64)


def _check_name(name, known):
    if name not in known:
        msg = "Unknown loss: %s (known losses: %s)" % (str(name), ", ".join(GRADCHECK_LOSSES))
        raise ValueError(msg)


class GradCheckCase(object):
    """
    One loss on one random instance. `params` are the tensors the loss is
    differentiated against, `loss_fn` maps them to a scalar.
    """

    def __init__(self, name, seed, sign_flip=False, step=DEFAULT_STEP, tolerance=DEFAULT_TOLERANCE):
        """
        :param name: (str) one of INPUT_LOSSES
        :param seed: (int) instance seed
        :param sign_flip: (bool) negate the analytic gradient (harness self-test)
        :param step: finite difference step h
        :param tolerance: maximum relative error
        """
        _check_name(name, INPUT_LOSSES)
        self.name = name
        self.seed = int(seed)
        self.sign_flip = sign_flip
        self.step = step
        self.tolerance = tolerance
        self.params, self.loss_fn = getattr(self, "_build_" + name)(rng_substream(seed, "gradcheck", name))

    # --- Instances ---

    @staticmethod
    def _build_ce(rng):
        logits, y = _tensor(rng, 1, NUM_CLASSES, SIZE, SIZE, low=-2.0, high=2.0), _labels(rng)
        return [logits], lambda z: loss_ce(F.softmax(z, dim=1), y)

    @staticmethod
    def _build_mixed_ce(rng):
        logits = _tensor(rng, 1, NUM_CLASSES, SIZE, SIZE, low=-2.0, high=2.0)
        y_s = _labels(rng, ignore_fraction=0.0)
        p_n = F.softmax(_tensor(rng, 1, NUM_CLASSES, SIZE, SIZE, low=-2.0, high=2.0), dim=1)
        mask = mask_from_classes(y_s, sample_half_classes(y_s[0], rng))
        y_mixed = mix_labels(y_s, p_n, mask)
        return [logits], lambda z: loss_mixed_ce(F.softmax(z, dim=1), y_mixed)

    @staticmethod
    def _build_focal(rng):
        p_day = F.softmax(_tensor(rng, 1, NUM_CLASSES, SIZE, SIZE, low=-2.0, high=2.0), dim=1)
        logits_n = _tensor(rng, 1, NUM_CLASSES, SIZE, SIZE, low=-2.0, high=2.0)
        return [logits_n], lambda z: loss_focal_ssl(p_day, F.softmax(z, dim=1), gamma=1.0)

    @staticmethod
    def _build_tv(rng):
        img, residual = _tensor(rng, 1, 3, SIZE, SIZE), _tensor(rng, 1, 3, SIZE, SIZE, low=-0.5, high=0.5)
        return [residual], lambda r: loss_tv(img, r)

    @staticmethod
    def _build_exp(rng):
        img, residual = _tensor(rng, 1, 3, SIZE, SIZE), _tensor(rng, 1, 3, SIZE, SIZE, low=-0.5, high=0.5)
        return [residual], lambda r: loss_exposure(r, r + img, pool_k=POOL_K)

    @staticmethod
    def _build_ssim(rng):
        img, residual = _tensor(rng, 1, 3, SIZE, SIZE), _tensor(rng, 1, 3, SIZE, SIZE, low=-0.5, high=0.5)
        return [residual], lambda r: loss_ssim(img, r)

    @staticmethod
    def _build_consistency(rng):
        mixed, day = _tensor(rng, 1, 3, SIZE, SIZE), _tensor(rng, 1, 3, SIZE, SIZE)
        return [mixed], lambda r: loss_consistency(r, day)

    @staticmethod
    def _build_adv(rng):
        dd, dn = _tensor(rng, 1, 1, 4, 4, low=-1.0, high=2.0), _tensor(rng, 1, 1, 4, 4, low=-1.0, high=2.0)
        return [dd, dn], loss_adv_gen

    @staticmethod
    def _build_disc(rng):
        maps = [_tensor(rng, 1, 1, 4, 4, low=-1.0, high=2.0) for _ in range(4)]
        return maps, loss_disc

    # --- Check ---

    def _evaluate(self, params):
        with torch.no_grad():
            return float(self.loss_fn(*params))

    def analytic_gradient(self):
        params = [p.clone().requires_grad_(True) for p in self.params]
        inputs = [FlippedGradient.apply(p) for p in params] if self.sign_flip else params
        self.loss_fn(*inputs).backward()
        return np.concatenate([p.grad.numpy().ravel() for p in params])

    def numerical_gradient(self):
        grads = []
        for index, param in enumerate(self.params):
            flat = param.reshape(-1)
            grad = np.zeros(flat.numel())
            for i in range(flat.numel()):
                shifted = [p.clone() for p in self.params]
                target = shifted[index].view(-1)
                target[i] = flat[i] + self.step
                f_plus = self._evaluate(shifted)
                target[i] = flat[i] - self.step
                f_minus = self._evaluate(shifted)
                grad[i] = (f_plus - f_minus) / (2.0 * self.step)
            grads.append(grad)
        return np.concatenate(grads)

    def run(self):
        """
        :return: GradCheckResult
        """
        analytic, numerical = self.analytic_gradient(), self.numerical_gradient()
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numerical), 1e-12)
        rel_err = float(np.linalg.norm(analytic - numerical) / scale)
        return GradCheckResult(self.name, self.seed, rel_err, rel_err <= self.tolerance)


class NetGradCheckCase(GradCheckCase):
    """
    One enhancement loss of a random 16x16 image as a function of all parameters of
    a relighting network. The gradient is compared with central differences along
    `n_directions` random unit directions of parameter space.
    """

    def __init__(self, name, seed, sign_flip=False, step=DEFAULT_STEP, tolerance=DEFAULT_TOLERANCE,
                 n_directions=NET_DIRECTIONS):
        """
        :param name: (str) one of NET_LOSSES
        :param seed: (int) instance seed
        :param sign_flip: (bool) negate the analytic gradient (harness self-test)
        :param step: finite difference step h along each unit direction
        :param tolerance: maximum relative error
        :param n_directions: number of random directions
        """
        _check_name(name, NET_LOSSES)
        self.name = name
        self.seed = int(seed)
        self.sign_flip = sign_flip
        self.step = step
        self.tolerance = tolerance
        rng = rng_substream(seed, "gradcheck", name)
        # every layer random, the output layer included, so no parameter has a zero gradient
        self.net = RelightNet()
        init_parameters(self.net, rng)
        self.net.double()
        self.loss_fn = getattr(self, "_build_" + name)(rng, self.net)
        n_params = sum(p.numel() for p in self.net.parameters())
        directions = rng_substream(seed, "gradcheck", name, "directions").normal(size=(int(n_directions), n_params))
        self.directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)

    # --- Instances ---

    @staticmethod
    def _build_net_tv(rng, net):
        img = _tensor(rng, 1, 3, NET_SIZE, NET_SIZE)
        return lambda n: loss_tv(img, relight(n, img))

    @staticmethod
    def _build_net_exp(rng, net):
        img = _tensor(rng, 1, 3, NET_SIZE, NET_SIZE)

        def loss_fn(n):
            residual = relight(n, img)
            return loss_exposure(residual, residual + img, pool_k=NET_POOL_K)
        return loss_fn

    @staticmethod
    def _build_net_ssim(rng, net):
        img = _tensor(rng, 1, 3, NET_SIZE, NET_SIZE)
        return lambda n: loss_ssim(img, relight(n, img))

    @staticmethod
    def _build_net_consistency(rng, net):
        mixed, day = _tensor(rng, 1, 3, NET_SIZE, NET_SIZE), _tensor(rng, 1, 3, NET_SIZE, NET_SIZE)
        # the day residual is a fixed target, taken at the initial parameters
        with torch.no_grad():
            target = relight(net, day)
        return lambda n: loss_consistency(relight(n, mixed), target)

    # --- Check ---

    def _evaluate_at(self, theta):
        with torch.no_grad():
            vector_to_parameters(theta, self.net.parameters())
            return float(self.loss_fn(self.net))

    def analytic_gradient(self):
        self.net.zero_grad(set_to_none=True)
        self.loss_fn(self.net).backward()
        grad = torch.cat([p.grad.reshape(-1) for p in self.net.parameters()]).numpy()
        projected = self.directions @ grad
        return -projected if self.sign_flip else projected

    def numerical_gradient(self):
        theta = parameters_to_vector(self.net.parameters()).detach().clone()
        grad = np.zeros(len(self.directions))
        try:
            for i, direction in enumerate(self.directions):
                offset = torch.from_numpy(direction * self.step)
                f_plus = self._evaluate_at(theta + offset)
                f_minus = self._evaluate_at(theta - offset)
                grad[i] = (f_plus - f_minus) / (2.0 * self.step)
        finally:
            with torch.no_grad():
                vector_to_parameters(theta, self.net.parameters())
        return grad


def make_case(name, seed, sign_flip=False):
    """
    :param name: (str) one of GRADCHECK_LOSSES
    :param seed: (int) instance seed
    :param sign_flip: (bool) negate the analytic gradient
    :return: GradCheckCase or NetGradCheckCase
    """
    if name in NET_LOSSES:
        return NetGradCheckCase(name, seed, sign_flip=sign_flip)
    return GradCheckCase(name, seed, sign_flip=sign_flip)


def run_gradchecks(names=None, seeds=DEFAULT_SEEDS, sign_flip=False):
    """
    Run the finite difference check for a list of losses and seeds
    :param names: loss names (all of GRADCHECK_LOSSES if None)
    :param seeds: instance seeds
    :param sign_flip: (bool) negate all analytic gradients
    :return: list of GradCheckResult
    """
    names = GRADCHECK_LOSSES if names is None else names
    results = []
    for name in names:
        for seed in seeds:
            result = make_case(name, seed, sign_flip=sign_flip).run()
            logger.debug("gradcheck %-12s seed %d  rel. err. %.3e" % (name, seed, result.rel_err))
            results.append(result)
    return results
