"""Gram statistics of forget-set representations and closed-form adapter merging.

A :class:`GramRecord` keeps, for every occupied adapter slot and for each of
the two linear sub-layers (``down`` and ``up``), the input Gram matrix
``X^T X`` and the product ``X^T X W``. Those are the only quantities the
merge needs, so the raw forget records can be discarded once recorded.

Binary Gram file layout (all integers and floats little-endian)::

    8s   magic  b"EULGRAM1"
    u32  version (1)
    u32  n_layers (occupied slots)
    u32  d_model
    u32  d_bottleneck
    u64  sample_count (token vectors accumulated)
    u32  request_id byte length, then that many UTF-8 bytes
    per layer:
        u32  layer index
        f64  down.gram  d_model x d_model       (row-major)
        f64  down.cross d_model x d_bottleneck
        f64  up.gram    d_bottleneck x d_bottleneck
        f64  up.cross   d_bottleneck x d_model
    32s  sha256 of every preceding byte
"""
from __future__ import annotations

import hashlib
import logging
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import atomic_write
from .data import PAD, pad_tokens
from .errors import AlignmentError, ChecksumError, ContractError, FormatError
from .model import TransformerModel, UnlearningLayer
from .numerics.linalg import solve_spd

log = logging.getLogger(__name__)

MAGIC = b"EULGRAM1"
VERSION = 1
SUBLAYERS = ("down", "up")


@dataclass
class GramRecord:
    """Per-slot Gram statistics for one deletion request.

    ``layers`` maps a layer index to ``{"down": (gram, cross), "up": (gram, cross)}``.
    """
    request_id: str
    sample_count: int
    layers: dict = field(default_factory=dict)

    @property
    def layer_indices(self) -> list:
        return sorted(self.layers)

    def gram(self, layer: int, sub: str) -> np.ndarray:
        return self.layers[layer][sub][0]

    def cross(self, layer: int, sub: str) -> np.ndarray:
        return self.layers[layer][sub][1]

    def equals(self, other: GramRecord) -> bool:
        if (self.request_id, self.sample_count, self.layer_indices) != (
                other.request_id, other.sample_count, other.layer_indices):
            return False
        return all(np.array_equal(a, b)
                   for i in self.layers for s in SUBLAYERS
                   for a, b in zip(self.layers[i][s], other.layers[i][s]))


@dataclass
class FusedAdapterSet:
    adapters: list
    request_ids: list
    ridge: dict


def _sub_weight(adapter: UnlearningLayer, sub: str) -> np.ndarray:
    return adapter.w_down.data if sub == "down" else adapter.w_up.data


def record_gram(model: TransformerModel, adapter_set, forget_records, request_id: str = "",
                chunk: int = 256) -> GramRecord:
    """Accumulate token-level Gram statistics with ``adapter_set`` inserted.

    The down sub-layer sees the hidden state entering the adapter; the up
    sub-layer sees that adapter's own bottleneck activations. PAD positions
    are excluded.
    """
    if not forget_records:
        raise ContractError("record_gram needs at least one forget record")
    slots = [(i, a) for i, a in enumerate(adapter_set) if a is not None]
    if not slots:
        raise ContractError("adapter set has no occupied slots")
    saved = list(model.adapters)
    model.set_adapters(list(adapter_set))
    acc = {i: {s: None for s in SUBLAYERS} for i, _ in slots}
    count = 0
    try:
        seqs = [r.tokens for r in forget_records]
        for s in range(0, len(seqs), chunk):
            toks = model._prepare(pad_tokens(seqs[s:s + chunk]))
            captured = {}
            model.encode(toks, capture=captured)
            keep = (toks != PAD).reshape(-1)
            count += int(keep.sum())
            for i, a in slots:
                x = captured[i].reshape(-1, a.d_model)[keep]
                z = a.bottleneck(x)
                for sub, inp in (("down", x), ("up", z)):
                    g = inp.T @ inp
                    prev = acc[i][sub]
                    acc[i][sub] = g if prev is None else prev + g
    finally:
        model.adapters = saved
    layers = {}
    for i, a in slots:
        layers[i] = {}
        for sub in SUBLAYERS:
            g = acc[i][sub]
            g = 0.5 * (g + g.T)
            layers[i][sub] = (g, g @ _sub_weight(a, sub))
    return GramRecord(request_id, count, layers)


def _aligned(records, adapters):
    ids = [r.request_id for r in records]
    if len(set(ids)) != len(ids):
        raise AlignmentError(f"duplicate request ids in Gram records: {ids}")
    if isinstance(adapters, Mapping):
        if set(adapters) != set(ids):
            raise AlignmentError(f"adapter keys {sorted(adapters)} do not match "
                                 f"Gram request ids {sorted(ids)}")
        pairs = [(r, adapters[r.request_id]) for r in records]
    else:
        adapters = list(adapters)
        if len(adapters) != len(records):
            raise AlignmentError(f"{len(records)} Gram records but {len(adapters)} adapter sets")
        pairs = list(zip(records, adapters))
    # fixed summation order makes the merge bitwise independent of input order
    pairs.sort(key=lambda p: p[0].request_id)
    layout = [i for i, a in enumerate(pairs[0][1]) if a is not None]
    for rec, aset in pairs:
        occupied = [i for i, a in enumerate(aset) if a is not None]
        if len(aset) != len(pairs[0][1]):
            raise AlignmentError(f"request {rec.request_id!r}: {len(aset)} adapter slots, "
                                 f"expected {len(pairs[0][1])}")
        if occupied != layout or rec.layer_indices != layout:
            raise AlignmentError(f"request {rec.request_id!r}: occupied slots {occupied} and "
                                 f"Gram layers {rec.layer_indices} differ from {layout}")
        for i in layout:
            for sub in SUBLAYERS:
                expect = rec.gram(i, sub) @ _sub_weight(aset[i], sub)
                got = rec.cross(i, sub)
                tol = 1e-8 * max(1.0, np.abs(expect).max())
                if expect.shape != got.shape or np.abs(expect - got).max() > tol:
                    raise AlignmentError(f"request {rec.request_id!r}: layer {i} {sub} cross "
                                         "term does not match gram @ W of the given adapter")
    return pairs, layout


def fuse(records, adapters, ridge_scale: float = 1e-6) -> FusedAdapterSet:
    """Merge adapter sets by the closed-form least-squares solution per sub-layer.

    ``W_m = (sum G_i + rho I)^-1 (sum G_i W_i + rho W_bar)`` with
    ``rho = ridge_scale * trace(sum G_i) / d_in`` and ``W_bar`` the
    sample-weighted mean of the inputs. Shrinking towards ``W_bar`` instead of
    zero keeps single-adapter and identical-adapter merges exact at any ridge.
    Biases are sample-weighted means. ``adapters`` is a mapping from request id
    to adapter set, or a sequence aligned with ``records``.
    """
    if not records:
        raise ContractError("fuse needs at least one Gram record")
    if ridge_scale < 0:
        raise ContractError("ridge_scale must be >= 0")
    pairs, layout = _aligned(records, adapters)
    n_slots = len(pairs[0][1])
    counts = np.array([float(r.sample_count) for r, _ in pairs])
    weights = counts / counts.sum() if counts.sum() > 0 else np.full(len(pairs), 1.0 / len(pairs))

    merged = [None] * n_slots
    ridges = {}
    for i in layout:
        new = {}
        for sub in SUBLAYERS:
            gram = sum(r.gram(i, sub) for r, _ in pairs)
            cross = sum(r.cross(i, sub) for r, _ in pairs)
            w_bar = sum(w * _sub_weight(a[i], sub) for w, (_, a) in zip(weights, pairs))
            d_in = gram.shape[0]
            trace = float(np.trace(gram))
            rho = ridge_scale * trace / d_in if trace > 0 else ridge_scale
            ridges[f"{i}.{sub}"] = rho
            new[sub] = solve_spd(gram, cross + rho * w_bar, rho, name=f"layer {i} {sub}")
        b_down = sum(w * a[i].b_down.data for w, (_, a) in zip(weights, pairs))
        b_up = sum(w * a[i].b_up.data for w, (_, a) in zip(weights, pairs))
        merged[i] = UnlearningLayer(new["down"], b_down, new["up"], b_up)
    ids = [r.request_id for r, _ in pairs]
    log.info("fused %d adapter sets (%s)", len(pairs), ", ".join(ids))
    return FusedAdapterSet(merged, ids, ridges)


# ---------------------------------------------------------------- persistence

def _encode(record: GramRecord) -> bytes:
    layout = record.layer_indices
    if not layout:
        raise ContractError("Gram record has no layers")
    d, b = record.gram(layout[0], "down").shape[0], record.gram(layout[0], "up").shape[0]
    rid = record.request_id.encode("utf-8")
    parts = [MAGIC, struct.pack("<IIIIQI", VERSION, len(layout), d, b, record.sample_count,
                                len(rid)), rid]
    shapes = {"down": ((d, d), (d, b)), "up": ((b, b), (b, d))}
    for i in layout:
        parts.append(struct.pack("<I", i))
        for sub in SUBLAYERS:
            for arr, shape in zip(record.layers[i][sub], shapes[sub]):
                if arr.shape != shape:
                    raise FormatError(f"layer {i} {sub}: shape {arr.shape}, expected {shape}")
                parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_gram(record: GramRecord, path) -> None:
    atomic_write(path, _encode(record))


def load_gram(path) -> GramRecord:
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_gram(data)


def decode_gram(data: bytes) -> GramRecord:
    if len(data) < len(MAGIC) + 28 + 32 or data[:len(MAGIC)] != MAGIC:
        raise FormatError("not a Gram file (bad magic or too short)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("Gram file checksum mismatch (truncated or corrupt)")
    off = len(MAGIC)
    version, n_layers, d, b, count, n_rid = struct.unpack_from("<IIIIQI", body, off)
    if version != VERSION:
        raise FormatError(f"unsupported Gram file version {version}")
    off += 28
    rid = body[off:off + n_rid].decode("utf-8")
    off += n_rid
    shapes = {"down": ((d, d), (d, b)), "up": ((b, b), (b, d))}
    expected = off + n_layers * (4 + 8 * (d * d + d * b + b * b + b * d))
    if expected != len(body):
        raise FormatError(f"shape table implies {expected} bytes, file body has {len(body)}")
    layers = {}
    for _ in range(n_layers):
        (i,) = struct.unpack_from("<I", body, off)
        off += 4
        layers[i] = {}
        for sub in SUBLAYERS:
            pair = []
            for shape in shapes[sub]:
                n = shape[0] * shape[1]
                pair.append(np.frombuffer(body, "<f8", n, off).reshape(shape).astype(np.float64))
                off += 8 * n
            layers[i][sub] = tuple(pair)
    return GramRecord(rid, int(count), layers)
