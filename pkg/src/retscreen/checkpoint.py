"""Versioned binary checkpoints for micro-CNN models.

Layout: 4-byte magic ``RSCK``, format version as little-endian u16, a
u32-length-prefixed UTF-8 JSON blob holding the config (plus training
metadata), then a u32 parameter count followed by one record per
parameter: u16 name length, name bytes, u8 ndim, u32 dims, raw
little-endian float32 data. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Tensor
from .micro_cnn import MicroCnnConfig, MicroCnnModel, parameter_shapes

MAGIC = b"RSCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path):
    header = json.dumps(
        {"config": model.config.to_json_dict(), "training_meta": model.training_meta},
        sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<H", FORMAT_VERSION),
              struct.pack("<I", len(header)), header,
              struct.pack("<I", len(model.parameters))]
    for name, tensor in model.parameters.items():
        name_b = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.values, dtype="<f4")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"truncated checkpoint: {path}")
        out = data[off:off + n]
        off += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"bad magic in {path}: not a checkpoint file")
    (version,) = struct.unpack("<H", take(2))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    (hdr_len,) = struct.unpack("<I", take(4))
    header = json.loads(take(hdr_len).decode("utf-8"))
    config = MicroCnnConfig.from_json_dict(header["config"])
    expected = parameter_shapes(config)

    (n_params,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
        if name not in expected:
            raise CheckpointError(f"unexpected parameter {name!r} in {path}")
        if tuple(shape) != expected[name]:
            raise CheckpointError(
                f"parameter {name!r} has shape {tuple(shape)}, config implies "
                f"{expected[name]}")
        params[name] = Tensor(arr)
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint {path} missing parameters: {sorted(missing)}")
    return MicroCnnModel(config, params, header.get("training_meta", {}))
