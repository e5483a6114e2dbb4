# -*- coding: utf-8 -*-

"""
Checkpoint storage. A checkpoint is a directory with

    params.bin      binary container of named float32 little-endian arrays,
                    each record prefixed with its name and shape
    manifest.json   {format_version, iteration, config_digest, model_digest,
                     phase, checksum, optimizers}

The checksum is the sha256 of params.bin and is verified on load.
"""

import json
from pathlib import Path
from collections import OrderedDict

import numpy as np
import torch
from loguru import logger
from construct import Struct, Const, Int8ul, Int16ul, Int32ul, PascalString, Array, Bytes, PrefixedArray, \
    ConstructError, this

from ._errors import CheckpointError, DimensionError, IntegrityError
from ._utils import file_digest

FORMAT_VERSION = 1
PARAMS_FILENAME = "params.bin"
MANIFEST_FILENAME = "manifest.json"


def _record_nbytes(ctx):
    return 4 * int(np.prod(ctx.shape, dtype=np.int64))


ArrayRecord = Struct(
    "name" / PascalString(Int16ul, "utf8"),
    "ndim" / Int8ul,
    "shape" / Array(this.ndim, Int32ul),
    "data" / Bytes(_record_nbytes),
)

ParameterContainer = Struct(
    "magic" / Const(b"BMXP"),
    "format_version" / Int16ul,
    "arrays" / PrefixedArray(Int32ul, ArrayRecord),
)


def pack_arrays(arrays):
    """
    Serialize named arrays into the binary container format
    :param arrays: (OrderedDict) name -> numpy array
    :return: bytes
    """
    records = []
    for name, array in arrays.items():
        array = np.asarray(array, dtype="<f4")
        records.append(dict(name=name, ndim=array.ndim, shape=list(array.shape), data=array.tobytes()))
    return ParameterContainer.build(dict(format_version=FORMAT_VERSION, arrays=records))


def unpack_arrays(payload):
    """
    Parse the binary container format
    :param payload: bytes
    :return: (OrderedDict) name -> numpy float32 array
    """
    try:
        container = ParameterContainer.parse(payload)
    except ConstructError as e:
        raise IntegrityError("cannot parse parameter container: {}".format(e))
    if container.format_version != FORMAT_VERSION:
        msg = "unsupported container version {} (expected {})".format(container.format_version, FORMAT_VERSION)
        raise CheckpointError(msg)
    arrays = OrderedDict()
    for record in container.arrays:
        shape = tuple(int(n) for n in record.shape)
        arrays[record.name] = np.frombuffer(record.data, dtype="<f4").reshape(shape).copy()
    return arrays


class Checkpoint(object):
    """
    In-memory checkpoint: network parameters, optimizer state, iteration counter and
    the digests of the configuration that produced it
    """

    def __init__(self, arrays, iteration, config_digest, model_digest, phase, optimizers=None):
        """
        :param arrays: (OrderedDict) name -> numpy array (parameters and optimizer state)
        :param iteration: (int) number of completed iterations of the phase
        :param config_digest: (str) digest of the full configuration
        :param model_digest: (str) digest of the architecture relevant configuration
        :param phase: (str) "init", "pretrain" or "adapt"
        :param optimizers: (dict) optimizer name -> param_groups (json-serializable)
        """
        self.arrays = arrays
        self.iteration = int(iteration)
        self.config_digest = config_digest
        self.model_digest = model_digest
        self.phase = phase
        self.optimizers = optimizers if optimizers is not None else {}

    @classmethod
    def from_trainer(cls, trainer, phase):
        """
        Snapshot the state of a trainer
        :param trainer: (BimixTrainer)
        :param phase: (str) name of the training phase
        :return: Checkpoint
        """
        arrays = OrderedDict()
        for net_name, net in trainer.networks().items():
            for param_name, tensor in net.state_dict().items():
                arrays["%s/%s" % (net_name, param_name)] = tensor.detach().cpu().numpy()

        optimizers = {}
        for opt_name, optimizer in trainer.optimizers().items():
            state_dict = optimizer.state_dict()
            for param_index, param_state in state_dict["state"].items():
                for key, value in param_state.items():
                    if value is None:
                        continue
                    value = value if isinstance(value, torch.Tensor) else torch.tensor(float(value))
                    arrays["%s/state/%d/%s" % (opt_name, int(param_index), key)] = value.detach().cpu().numpy()
            optimizers[opt_name] = state_dict["param_groups"]

        cfg = trainer.cfg
        return cls(arrays, trainer.iteration, cfg.digest, cfg.model_digest, phase, optimizers=optimizers)

    def apply_to(self, trainer, load_optimizers=True):
        """
        Restore network parameters (and optionally the optimizer state) into a trainer
        :param trainer: (BimixTrainer)
        :param load_optimizers: (bool) restore momenta / adaptive moments as well
        :return: None
        """
        for net_name, net in trainer.networks().items():
            state = OrderedDict()
            for param_name, tensor in net.state_dict().items():
                key = "%s/%s" % (net_name, param_name)
                if key not in self.arrays:
                    raise CheckpointError("checkpoint lacks array: %s" % key)
                array = self.arrays[key]
                if tuple(array.shape) != tuple(tensor.shape):
                    msg = "shape mismatch for {}: checkpoint {} vs network {}"
                    raise DimensionError(msg.format(key, tuple(array.shape), tuple(tensor.shape)))
                state[param_name] = torch.from_numpy(array.copy()).to(tensor.dtype)
            net.load_state_dict(state)

        if not load_optimizers:
            return

        for opt_name, optimizer in trainer.optimizers().items():
            if opt_name not in self.optimizers:
                logger.warning("No optimizer state for %s in checkpoint" % opt_name)
                continue
            prefix = "%s/state/" % opt_name
            state = {}
            for key, array in self.arrays.items():
                if not key.startswith(prefix):
                    continue
                param_index, state_key = key[len(prefix):].split("/", 1)
                state.setdefault(int(param_index), {})[state_key] = torch.from_numpy(array.copy())
            optimizer.load_state_dict(dict(state=state, param_groups=self.optimizers[opt_name]))

    def save(self, path):
        """
        Write the checkpoint directory
        :param path: (str, pathlib.Path) target directory (created if needed)
        :return: pathlib.Path of the manifest
        """
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        params_path = path / PARAMS_FILENAME
        with open(str(params_path), "wb") as f:
            f.write(pack_arrays(self.arrays))

        manifest = OrderedDict((("format_version", FORMAT_VERSION),
                                ("iteration", self.iteration),
                                ("config_digest", self.config_digest),
                                ("model_digest", self.model_digest),
                                ("phase", self.phase),
                                ("checksum", file_digest(params_path)),
                                ("optimizers", self.optimizers)))
        manifest_path = path / MANIFEST_FILENAME
        with open(str(manifest_path), "w") as f:
            json.dump(manifest, f, indent=2)
        logger.debug("Checkpoint written: %s (iteration %d)" % (path, self.iteration))
        return manifest_path

    @classmethod
    def load(cls, path):
        """
        Read a checkpoint directory and verify its checksum
        :param path: (str, pathlib.Path) checkpoint directory
        :return: Checkpoint
        """
        path = Path(path)
        manifest_path, params_path = path / MANIFEST_FILENAME, path / PARAMS_FILENAME
        if not manifest_path.is_file() or not params_path.is_file():
            raise CheckpointError("Not a checkpoint directory: %s" % path)

        with open(str(manifest_path), "r") as f:
            manifest = json.load(f)

        checksum = file_digest(params_path)
        if checksum != manifest.get("checksum"):
            msg = "checksum mismatch in {}: manifest {} vs payload {}"
            raise IntegrityError(msg.format(path, manifest.get("checksum"), checksum))

        with open(str(params_path), "rb") as f:
            arrays = unpack_arrays(f.read())

        return cls(arrays, manifest["iteration"], manifest["config_digest"], manifest["model_digest"],
                   manifest["phase"], optimizers=manifest.get("optimizers", {}))
