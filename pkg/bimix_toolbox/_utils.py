# -*- coding: utf-8 -*-

"""
Small helper function for the toolbox
"""

import json
import zlib
import hashlib
import importlib

import yaml
import numpy as np
import torch
from omegaconf import OmegaConf


def get_yaml_cfg(yaml_filepath):
    """
    Return the content of a yaml config file as an attribute-accessible dictionary
    :param yaml_filepath: Path to yaml config file
    :return: omegaconf.DictConfig
    """
    with open(str(yaml_filepath), 'r') as fileobj:
        content = yaml.safe_load(fileobj) or {}
    return OmegaConf.create(content)


def get_cls(module_name, class_name, relaxed=True):
    """ Small helper function to dynamically load classes"""
    try:
        module = importlib.import_module(module_name)
    except ImportError:
        if relaxed:
            return None
        else:
            raise ImportError("Cannot load module: %s" % module_name)
    try:
        return getattr(module, class_name)
    except AttributeError:
        if relaxed:
            return None
        else:
            raise NotImplementedError("Cannot load class: %s.%s" % (module_name, class_name))


def rng_substream(seed, *names):
    """
    Return an independent random stream for a named purpose. The stream is a pure
    function of the seed and the names, e.g. rng_substream(0, "classmix", 17) will
    always yield the same draws no matter what other streams have been used.
    :param seed: (int) the global experiment seed
    :param names: (str, int) the keys of the substream
    :return: numpy.random.Generator
    """
    spawn_key = tuple(zlib.crc32(str(name).encode("utf8")) for name in names)
    seed_sequence = np.random.SeedSequence(int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.PCG64(seed_sequence))


def json_digest(content):
    """
    sha256 hex digest of the canonical json representation of `content`
    :param content: json-serializable object
    :return: str
    """
    canonical = json.dumps(content, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf8")).hexdigest()


def file_digest(filepath, chunk_size=1 << 20):
    """ sha256 hex digest of a file content """
    sha = hashlib.sha256()
    with open(str(filepath), "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            sha.update(chunk)
    return sha.hexdigest()


def init_parameters(module, rng, zero_init=()):
    """
    Initialize all conv weights and biases of a network from a numpy stream with the
    uniform fan-in bound torch uses by default. Layers listed in `zero_init` are set
    to zero.
    :param module: (torch.nn.Module) the network
    :param rng: (numpy.random.Generator) the `init/<net>` stream
    :param zero_init: names of submodules to zero
    :return: None
    """
    with torch.no_grad():
        for name, layer in module.named_modules():
            weight = getattr(layer, "weight", None)
            if not isinstance(weight, torch.Tensor):
                continue
            bias = getattr(layer, "bias", None)
            if name in zero_init:
                weight.zero_()
                if bias is not None:
                    bias.zero_()
                continue
            # ConvTranspose weights are stored (in, out, kh, kw)
            fan_in = weight[0].numel() if not isinstance(layer, torch.nn.ConvTranspose2d) \
                else weight.shape[0] * weight[0, 0].numel()
            bound = 1.0 / np.sqrt(fan_in)
            values = rng.uniform(-bound, bound, size=tuple(weight.shape))
            weight.copy_(torch.from_numpy(values).to(weight.dtype))
            if bias is not None:
                values = rng.uniform(-bound, bound, size=tuple(bias.shape))
                bias.copy_(torch.from_numpy(values).to(bias.dtype))
