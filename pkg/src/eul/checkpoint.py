"""Checkpoint container for backbones and adapter sets.

Layout (little-endian)::

    8s   magic  b"EULCKPT1"
    u32  version (1)
    u64  header length in bytes
    ...  UTF-8 JSON header: {"meta": {...}, "arrays": [{"name", "shape", "offset"}]}
    ...  float64 array data, concatenated in header order
    32s  sha256 of every preceding byte

Backbone weights are stored as ``backbone/<param>``; adapter sets as
``adapters/<set name>/<layer>/<w_down|b_down|w_up|b_up>``.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .errors import ChecksumError, FormatError
from .model import BackboneConfig, TransformerModel, UnlearningLayer
from .numerics.tensor import Tensor

MAGIC = b"EULCKPT1"
VERSION = 1
_FIELDS = ("w_down", "b_down", "w_up", "b_up")


def atomic_write(path, data: bytes):
    """Write via a temporary file in the same directory so readers never see partial files."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(arrays: dict, meta: dict | None = None) -> bytes:
    table, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8")
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta or {}, "arrays": table}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode(data: bytes):
    if len(data) < len(MAGIC) + 12 + 32 or data[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint (bad magic or too short)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch (truncated or corrupt)")
    version, n_header = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + n_header])
    base = start + n_header
    # validate the whole shape table before touching any weight bytes
    expect, counts = 0, []
    for entry in header.get("arrays", []):
        shape = tuple(entry["shape"])
        if any(d < 0 for d in shape) or entry["offset"] != expect:
            raise FormatError(f"inconsistent shape table entry {entry['name']!r}")
        counts.append(int(np.prod(shape)) if shape else 1)
        expect += 8 * counts[-1]
    if base + expect != len(body):
        raise FormatError(f"shape table describes {expect} data bytes, file holds {len(body) - base}")
    arrays = {}
    for entry, count in zip(header["arrays"], counts):
        lo = base + entry["offset"]
        arr = np.frombuffer(body, "<f8", count, lo).reshape(tuple(entry["shape"]))
        arrays[entry["name"]] = arr.astype(np.float64)
    return arrays, header.get("meta", {})


def save(path, arrays: dict, meta: dict | None = None):
    atomic_write(path, encode(arrays, meta))


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


# ------------------------------------------------------------- model helpers

def adapter_arrays(adapters, set_name: str) -> dict:
    if not set_name or "/" in set_name:
        raise FormatError(f"adapter set name {set_name!r} must be non-empty and contain no '/'")
    out = {}
    for i, a in enumerate(adapters):
        if a is not None:
            for k, v in a.arrays().items():
                out[f"adapters/{set_name}/{i}/{k}"] = v
    return out


def adapters_from(arrays: dict, set_name: str, n_layers: int) -> list:
    prefix = f"adapters/{set_name}/"
    if not any(k.startswith(prefix) for k in arrays):
        raise FormatError(f"no adapter set named {set_name!r} in checkpoint")
    out = []
    for i in range(n_layers):
        keys = [f"{prefix}{i}/{f}" for f in _FIELDS]
        out.append(UnlearningLayer(*(arrays[k].copy() for k in keys))
                   if keys[0] in arrays else None)
    return out


def adapter_set_names(arrays: dict) -> list:
    return sorted({k.split("/")[1] for k in arrays if k.startswith("adapters/")})


def save_model(path, model: TransformerModel, meta: dict | None = None, adapter_sets=None):
    """Backbone plus optional named adapter sets (``{name: adapters}``)."""
    arrays = {f"backbone/{k}": v.data for k, v in model.params.items()}
    for name, adapters in (adapter_sets or {}).items():
        arrays.update(adapter_arrays(adapters, name))
    meta = dict(meta or {})
    meta["backbone_config"] = model.config.to_dict()
    save(path, arrays, meta)


def load_model(path):
    """Returns ``(model, meta, adapter_sets)``; the model has no adapters inserted."""
    arrays, meta = load(path)
    if "backbone_config" not in meta:
        raise FormatError("checkpoint has no backbone")
    cfg = BackboneConfig(**meta["backbone_config"])
    params = {k[len("backbone/"):]: Tensor(v, name=k[len("backbone/"):])
              for k, v in arrays.items() if k.startswith("backbone/")}
    model = TransformerModel(cfg, params)
    sets = {n: adapters_from(arrays, n, cfg.n_layers) for n in adapter_set_names(arrays)}
    return model, meta, sets


def save_adapters(path, adapter_sets: dict, meta: dict | None = None):
    arrays = {}
    for name, adapters in adapter_sets.items():
        arrays.update(adapter_arrays(adapters, name))
    meta = dict(meta or {})
    meta["n_layers"] = max((len(a) for a in adapter_sets.values()), default=0)
    save(path, arrays, meta)


def load_adapters(path):
    """Returns ``({set name: adapters}, meta)``."""
    arrays, meta = load(path)
    n = int(meta.get("n_layers", 0))
    return {name: adapters_from(arrays, name, n) for name in adapter_set_names(arrays)}, meta
