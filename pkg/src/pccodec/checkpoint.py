"""Checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"PCCK"
    4       2     format version (u16, currently 1)
    6       2     reserved, zero
    8       4     header length H (u32)
    12      H     UTF-8 JSON header
    12+H    ...   tensor payloads, concatenated in header order

The JSON header holds ``config`` (name), ``points``, ``meta`` (free-form
training metadata) and ``tensors``: a list of ``{"name", "dtype", "shape"}``
records with ``dtype`` either ``"f32"`` or ``"i32"``. Parameters are stored
under their dotted names, batch-norm running statistics under
``buffer:<name>``, and coding tables as ``table:offset``, ``table:length``
and ``table:cdf``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from .codec import Codec, get_config
from .entropy import CodingTable

MAGIC = b"PCCK"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


class CheckpointError(ValueError):
    pass


def _tensor_list(codec: Codec):
    items = [(name, "f32", p.data) for name, p in codec.parameters().items()]
    items += [(f"buffer:{name}", "f32", b) for name, b in codec.buffers().items()]
    if codec.tables is not None:
        t = codec.tables
        items += [
            ("table:offset", "i32", t.offset),
            ("table:length", "i32", t.length),
            ("table:cdf", "i32", t.cdf),
        ]
    return items


def dumps(codec: Codec, meta: Dict[str, Any] | None = None) -> bytes:
    items = _tensor_list(codec)
    header = {
        "config": codec.config.name,
        "points": codec.config.points,
        "meta": meta or {},
        "tensors": [{"name": n, "dtype": d, "shape": list(np.shape(a))} for n, d, a in items],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HHI", VERSION, 0, len(hbytes)), hbytes]
    for _, d, a in items:
        parts.append(np.ascontiguousarray(a, dtype=_DTYPES[d]).tobytes())
    return b"".join(parts)


def loads(data: bytes) -> Tuple[Codec, Dict[str, Any]]:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("not a codec checkpoint (bad magic)")
    version, _, hlen = struct.unpack_from("<HHI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    codec = Codec(get_config(header["config"], header["points"]))
    params = codec.parameters()
    buffers = codec.buffers()
    tables = {}
    pos = 12 + hlen
    for rec in header["tensors"]:
        dt = _DTYPES[rec["dtype"]]
        shape = tuple(rec["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + n > len(data):
            raise CheckpointError(f"checkpoint truncated in tensor {rec['name']!r}")
        arr = np.frombuffer(data, dtype=dt, count=n // dt.itemsize, offset=pos).reshape(shape)
        pos += n
        name = rec["name"]
        if name.startswith("table:"):
            tables[name[6:]] = arr.astype(np.int32)
        elif name.startswith("buffer:"):
            target = buffers.get(name[7:])
            if target is None or target.shape != shape:
                raise CheckpointError(f"unexpected buffer {name!r} with shape {shape}")
            target[...] = arr
        else:
            p = params.get(name)
            if p is None or p.shape != shape:
                raise CheckpointError(f"unexpected parameter {name!r} with shape {shape}")
            p.data[...] = arr
    if tables:
        codec.tables = CodingTable(**tables)
        codec.tables.validate()
    codec.eval()
    return codec, header.get("meta", {})


def save(codec: Codec, path, meta: Dict[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(codec, meta))


def load(path) -> Tuple[Codec, Dict[str, Any]]:
    return loads(Path(path).read_bytes())
