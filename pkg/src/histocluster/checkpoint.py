"""Versioned binary container for named tensors plus JSON metadata.

Layout (all little-endian)::

    b"HCKP" | u32 version | u64 adam step | u32 n_tensors
    n_tensors x ( u16 name_len | name utf-8 | u8 dtype ('f' float32 / 'i' int32)
                  | u8 ndim | ndim x u32 dims | raw data )
    u32 meta_len | meta json (utf-8, sorted keys)

Tensors are written in sorted name order so equal inputs give equal bytes.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .nn import ParamStore

MAGIC = b"HCKP"
VERSION = 1
_DTYPES = {b"f": np.dtype("<f4"), b"i": np.dtype("<i4")}


class CheckpointError(ValueError):
    pass


def dumps(tensors, meta=None, step=0):
    out = [MAGIC, struct.pack("<IQI", VERSION, step, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = b"i" if np.issubdtype(arr.dtype, np.integer) else b"f"
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(code + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(out)


def loads(data):
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, step, n = struct.unpack_from("<IQI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 4 + struct.calcsize("<IQI")
    tensors = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        dtype = _DTYPES[data[pos:pos + 1]]
        ndim = data[pos + 1]
        pos += 2
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype, count, pos).reshape(dims).copy()
        pos += count * dtype.itemsize
    (ln,) = struct.unpack_from("<I", data, pos)
    meta = json.loads(data[pos + 4:pos + 4 + ln].decode("utf-8"))
    return tensors, meta, step


def store_tensors(store: ParamStore):
    out = {}
    for k in store.params:
        out[f"param/{k}"] = store.params[k]
        out[f"adam_m/{k}"] = store.m[k]
        out[f"adam_v/{k}"] = store.v[k]
    return out


def tensors_store(tensors, step=0):
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")}
    v = {k[7:]: a for k, a in tensors.items() if k.startswith("adam_v/")}
    return ParamStore(params, m, v, step)


def save(path, store, extra=None, meta=None):
    tensors = store_tensors(store)
    for k, v in (extra or {}).items():
        tensors[f"extra/{k}"] = v
    with open(path, "wb") as fh:
        fh.write(dumps(tensors, meta, store.step))


def load(path):
    """Returns ``(store, extra_tensors, meta)``."""
    with open(path, "rb") as fh:
        tensors, meta, step = loads(fh.read())
    extra = {k[6:]: v for k, v in tensors.items() if k.startswith("extra/")}
    return tensors_store(tensors, step), extra, meta
