"""Checkpoint container.

Byte layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"SATMCKPT"
    8       4     uint32 format version (currently 1)
    12      4     uint32 header length H in bytes
    16      H     UTF-8 JSON header, keys sorted, no whitespace:
                    {"config": ModelConfig fields,
                     "meta": free-form string/number map,
                     "tensors": [{"id": "0.weight", "kind": "param", "shape": [100, 64]}, ...]}
    16+H    ...   tensor payloads in header order, each C-ordered '<f8'

``kind`` is ``"param"`` for trainable entries and ``"running"`` for batch
renorm statistics. Files are byte-identical for identical inputs.
"""

import json
import struct

import numpy as np

from .errors import DataError
from .nn import ModelConfig, ParamStore

MAGIC = b"SATMCKPT"
VERSION = 1


def dumps(config, params, meta=None):
    tensors, blobs = [], []
    for kind, table in (("param", params.entries), ("running", params.running)):
        for key, value in table.items():
            tensors.append({"id": key, "kind": kind, "shape": list(value.shape)})
            blobs.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    header = json.dumps(
        {"config": config.to_dict(), "meta": meta or {}, "tensors": tensors},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(blobs)


def loads(data):
    """Inverse of :func:`dumps`; returns ``(config, params, meta)``."""
    if data[:8] != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    params = ParamStore()
    pos = 16 + hlen
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        if pos + 8 * n > len(data):
            raise DataError(f"checkpoint truncated while reading {t['id']}")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(t["shape"]).astype(np.float64)
        pos += 8 * n
        if t["kind"] == "param":
            params.add(t["id"], arr)
        else:
            params.running[t["id"]] = arr
    if pos != len(data):
        raise DataError("trailing bytes after checkpoint payload")
    return config, params, header["meta"]


def save(path, config, params, meta=None):
    with open(path, "wb") as f:
        f.write(dumps(config, params, meta))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
