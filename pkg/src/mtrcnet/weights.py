"""Binary weight container.

Layout (all integers little-endian)::

    magic        4 bytes   b"MTRW"
    version      uint32    1
    meta_len     uint32    length of a UTF-8 JSON metadata blob
    meta         bytes
    count        uint32    number of arrays
    then per array:
      name_len   uint16
      name       UTF-8, "<partition>/<parameter name>"
      ndim       uint8
      shape      ndim x uint32
      data       float32 little-endian, C order

Model arrays are keyed ``backbone/...``, ``tool_head/...``, ``phase_head/...``,
``mapping_cell/...``. Checkpoints add ``optimizer/...`` arrays.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import WeightFileError
from .model import PARTITIONS

MAGIC = b"MTRW"
VERSION = 1


def write_container(path, arrays: dict, meta: dict | None = None):
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC + struct.pack("<II", VERSION, len(blob)) + blob
    out += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        key = name.encode("utf-8")
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        out += a.tobytes()
    try:
        Path(path).write_bytes(bytes(out))
    except OSError as exc:
        raise WeightFileError(f"cannot write weight file {path}: {exc}") from exc


def read_container(path):
    """Returns ``(arrays, meta)`` with float32 numpy arrays."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise WeightFileError(f"cannot read weight file {path}: {exc}") from exc
    try:
        if buf[:4] != MAGIC:
            raise WeightFileError(f"{path}: not a weight container (bad magic)")
        version, meta_len = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise WeightFileError(f"{path}: unsupported container version {version}")
        pos = 12
        meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arrays[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise WeightFileError(f"{path}: truncated or corrupt weight container ({exc})") from exc
    return arrays, meta


def model_arrays(model) -> dict:
    return {
        name: p.detach().cpu().numpy()
        for name, p in model.named_partition_parameters()
    }


def save_weights(path, model, extra: dict | None = None, meta: dict | None = None):
    arrays = model_arrays(model)
    if extra:
        arrays.update(extra)
    m = {"arch": model.config.to_dict()}
    m.update(meta or {})
    write_container(path, arrays, m)


def load_weights(path, model, partitions=PARTITIONS):
    """Copy arrays for ``partitions`` from ``path`` into ``model`` in place."""
    arrays, meta = read_container(path)
    for name, p in model.named_partition_parameters():
        if name.split("/", 1)[0] not in partitions:
            continue
        if name not in arrays:
            raise WeightFileError(f"{path}: missing array {name}")
        a = arrays[name]
        if tuple(a.shape) != tuple(p.shape):
            raise WeightFileError(
                f"{path}: shape mismatch for {name}: file {tuple(a.shape)} vs model {tuple(p.shape)}"
            )
        with torch.no_grad():
            p.copy_(torch.from_numpy(a).to(p.dtype))
    return meta


def load_model(path):
    """Rebuild a model from a container that carries its architecture in metadata."""
    from .model import ArchConfig, MTRCNet

    _, meta = read_container(path)
    if "arch" not in meta:
        raise WeightFileError(f"{path}: no architecture metadata")
    model = MTRCNet(ArchConfig.from_dict(meta["arch"]))
    load_weights(path, model)
    return model, meta
