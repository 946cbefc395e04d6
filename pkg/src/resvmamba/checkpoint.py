"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"RSVM"                      magic, 4 bytes
    u32 version                  currently 1
    u32 n                        byte length of the config record
    n bytes                      config record, UTF-8 JSON with sorted keys
    u32 count                    number of tensors
    count times:
        u16 k, k bytes           tensor name, UTF-8
        u8 ndim
        ndim x u32               shape
        prod(shape) x f32        values, little-endian float32, C order

Tensors are written in model parameter order.  Saving then loading gives the
same bytes back.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"RSVM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config: dict, tensors: "OrderedDict[str, np.ndarray]") -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape)]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (n,) = take("<I")
    config = json.loads(buf[pos : pos + n].decode("utf-8"))
    pos += n
    (count,) = take("<I")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (k,) = take("<H")
        name = buf[pos : pos + k].decode("utf-8")
        pos += k
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        nbytes = 4 * size
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated in tensor {name!r}")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return config, tensors
