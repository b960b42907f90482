#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import json
import struct
import sys
from collections import OrderedDict


#### PACKAGE IMPORTS ###############################################################################
import numpy as np
import torch

from src.helpers import DGLMError, overwriteFile


#### GLOBALS #######################################################################################
MAGIC = b"DGLMCKP1"
LENGTH_FORMAT = "<Q"
PAYLOAD_DTYPE = np.dtype("<f4")


#### CLASSES #######################################################################################
class CheckpointFormatError(DGLMError):
    """
    Exception raised when a checkpoint file has a bad magic, manifest, or payload length.
    """
    pass


class CheckpointShapeError(DGLMError):
    """
    Exception raised when a stored tensor does not have the shape the caller expects.
    """
    pass


#### FUNCTIONS #####################################################################################
def saveCheckpoint(filepath, tensors, meta=None):
    """
    Write named tensors to a DGLMCKP1 container:
        8-byte magic | uint64 LE manifest length | UTF-8 JSON manifest | float32 LE payloads

    GIVEN:
      filepath (str) -- destination path
      tensors (OrderedDict) -- name -> tensor or array, written in iteration order
      meta (dict) -- JSON-serializable metadata stored in the manifest
    """
    arrays = OrderedDict()
    for name, value in tensors.items():
        if torch.is_tensor(value):
            value = value.detach().cpu().numpy()
        arrays[name] = np.ascontiguousarray(value, dtype=PAYLOAD_DTYPE)

    manifest = {
        "tensors": [[name, list(array.shape)] for name, array in arrays.items()],
        "meta": meta or dict(),
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tmp_file = filepath + ".tmp"
    with open(tmp_file, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack(LENGTH_FORMAT, len(manifest_bytes)))
        f.write(manifest_bytes)
        for array in arrays.values():
            f.write(array.tobytes())
    overwriteFile(filepath, tmp_file)


def loadCheckpoint(filepath, expected_shapes=None):
    """
    Read a DGLMCKP1 container.

    GIVEN:
      filepath (str) -- path to the checkpoint
      expected_shapes (dict) -- optional name -> shape; any mismatch raises CheckpointShapeError

    RETURN:
      tensors (OrderedDict) -- name -> float32 numpy array, in file order
      meta (dict) -- manifest metadata
    """
    with open(filepath, "rb") as f:
        data = f.read()

    header = len(MAGIC) + struct.calcsize(LENGTH_FORMAT)
    if len(data) < header or data[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("'{}' is not a DGLMCKP1 checkpoint.".format(filepath))
    (manifest_length,) = struct.unpack(LENGTH_FORMAT, data[len(MAGIC):header])
    if header + manifest_length > len(data):
        raise CheckpointFormatError("'{}' has a truncated manifest.".format(filepath))
    try:
        manifest = json.loads(data[header:header + manifest_length].decode("utf-8"))
        entries = [(str(name), tuple(int(n) for n in shape)) for name, shape in manifest["tensors"]]
        meta = manifest.get("meta", dict())
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointFormatError("'{}' has a malformed manifest: {}".format(filepath, e))

    tensors = OrderedDict()
    offset = header + manifest_length
    for name, shape in entries:
        nbytes = int(np.prod(shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize
        if offset + nbytes > len(data):
            raise CheckpointFormatError("'{}' is truncated inside tensor '{}'.".format(
                filepath, name))
        tensors[name] = np.frombuffer(data, dtype=PAYLOAD_DTYPE, count=nbytes // 4,
                                      offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise CheckpointFormatError("'{}' has {} trailing bytes.".format(
            filepath, len(data) - offset))

    for name, shape in (expected_shapes or dict()).items():
        if name not in tensors:
            raise CheckpointShapeError("Tensor '{}' is missing from '{}'.".format(name, filepath))
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointShapeError("Tensor '{}' has shape {} in '{}', expected {}.".format(
                name, tuple(tensors[name].shape), filepath, tuple(shape)))

    return tensors, meta


def saveModules(filepath, modules, meta=None):
    """
    Save several torch modules into one container. modules maps a name prefix to a module;
    tensors are stored as '<prefix>.<state_dict key>' in the given order.
    """
    tensors = OrderedDict()
    for prefix, module in modules.items():
        for name, value in module.state_dict().items():
            tensors["{}.{}".format(prefix, name)] = value
    saveCheckpoint(filepath, tensors, meta)


def loadModulesState(filepath, modules):
    """
    Load a container written by saveModules into already-built modules, checking every shape.

    RETURN:
      meta (dict) -- manifest metadata
    """
    states = OrderedDict((prefix, module.state_dict()) for prefix, module in modules.items())
    expected = OrderedDict()
    for prefix, state in states.items():
        for name, value in state.items():
            expected["{}.{}".format(prefix, name)] = tuple(value.shape)
    tensors, meta = loadCheckpoint(filepath, expected)
    extra = [name for name in tensors if name not in expected]
    if extra:
        raise CheckpointShapeError("Unexpected tensor '{}' in '{}'.".format(extra[0], filepath))

    for prefix, module in modules.items():
        state = states[prefix]
        module.load_state_dict(OrderedDict(
            (name, torch.from_numpy(tensors["{}.{}".format(prefix, name)]).to(value.dtype))
            for name, value in state.items()
        ))
    return meta


def saveModule(filepath, module, meta=None):
    """
    Save every parameter and buffer of a single torch module.
    """
    saveModules(filepath, OrderedDict([("model", module)]), meta)


def loadModuleState(filepath, module):
    """
    Load a checkpoint written by saveModule into an already-built module.
    """
    return loadModulesState(filepath, OrderedDict([("model", module)]))


#### MAIN ##########################################################################################
if __name__ == "__main__": # pragma: no cover
    sys.exit("This file is not intended to be run independently. Please execute './main.py' to "
             "access this functionality.")
