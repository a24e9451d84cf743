"""Checkpoint file format: one JSON header line describing the config and
tensor layout, then the raw little-endian float64 data in listed order."""

import json

import numpy as np

from . import model
from .config import TrainConfig
from .errors import CheckpointError, ConfigError

FORMAT = "hierattn-checkpoint-v1"


def save_checkpoint(path, cfg, arrays):
    header = {
        "format": FORMAT,
        "config": cfg.to_dict(),
        "tensors": [{"name": k, "shape": list(arrays[k].shape)}
                    for k in sorted(arrays)],
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        for k in sorted(arrays):
            fh.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read and validate a checkpoint; returns (config, arrays). The tensor
    set and shapes must match what the stored config builds."""
    with open(path, "rb") as fh:
        first = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(first.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: missing or malformed checkpoint header")
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    try:
        cfg = TrainConfig.from_dict(header["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: bad embedded config ({exc})")
    tensors = header.get("tensors")
    if not isinstance(tensors, list):
        raise CheckpointError(f"{path}: header lists no tensors")
    arrays = {}
    offset = 0
    for entry in tensors:
        try:
            name, shape = entry["name"], tuple(int(d) for d in entry["shape"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"{path}: malformed tensor entry {entry!r}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: data truncated at tensor {name}")
        arrays[name] = np.frombuffer(
            blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes "
                              f"after the last tensor")
    _check_shapes(cfg, arrays, path)
    return cfg, arrays


def _check_shapes(cfg, arrays, path):
    skeleton = model.init_model(cfg, np.random.default_rng(0))
    if set(skeleton) != set(arrays):
        missing = sorted(set(skeleton) - set(arrays))
        extra = sorted(set(arrays) - set(skeleton))
        raise CheckpointError(f"{path}: tensor set does not match the config "
                              f"(missing {missing[:3]}, unexpected {extra[:3]})")
    for k, v in skeleton.items():
        if arrays[k].shape != v.shape:
            raise CheckpointError(f"{path}: tensor {k} has shape "
                                  f"{arrays[k].shape}, config implies {v.shape}")
