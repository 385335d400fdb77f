"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PFHR" | u32 version | u32 input ndim | u32 dims... | u16 len + template utf8
    u32 block count, then per block:
        u8 block tag | u8 provenance tag | i32 client_id | i32 layer_index
        u32 extra (dropout*1e6 for FC, depth for adapters, 0 otherwise)
        u32 in ndim | u32 dims... | u32 out ndim | u32 dims...
        u32 tensor count, then per tensor:
            u16 len + name utf8 | u32 ndim | u32 dims... | raw f32 payload

The head, when present, is the last block (tag HEAD).
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from ..errors import BadMagic, CheckpointError, TruncatedFile
from .layers import (
    DTYPE,
    ChannelProjectAdapter,
    ConvUnit,
    DenseAdapter,
    FCUnit,
    Linear,
    Provenance,
)
from .model import Model

MAGIC = b"PFHR"
VERSION = 1

_BLOCK_TAGS = {ConvUnit: 0, FCUnit: 1, Linear: 2, DenseAdapter: 3, ChannelProjectAdapter: 4}
_TAG_BLOCKS = {v: k for k, v in _BLOCK_TAGS.items()}
_PROV_TAGS = {"fresh": 0, "client": 1, "stitch": 2, "averaged": 3}
_TAG_PROV = {v: k for k, v in _PROV_TAGS.items()}


def _put_dims(buf, dims) -> None:
    buf.write(struct.pack("<I", len(dims)))
    buf.write(struct.pack(f"<{len(dims)}I", *dims))


def _put_str(buf, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def dumps(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _put_dims(buf, model.input_spec)
    _put_str(buf, model.template or "")
    blocks = model.blocks()
    buf.write(struct.pack("<I", len(blocks)))
    for block in blocks:
        prov = block.provenance
        extra = 0
        if isinstance(block, FCUnit):
            extra = int(round(block.dropout * 1e6))
        elif isinstance(block, (DenseAdapter, ChannelProjectAdapter)):
            extra = block.depth
        buf.write(struct.pack("<BBiiI", _BLOCK_TAGS[type(block)], _PROV_TAGS[prov.kind],
                              prov.client_id, prov.layer_index, extra))
        _put_dims(buf, block.in_spec)
        _put_dims(buf, block.out_spec)
        tensors = {**block.params, **block.buffers}
        buf.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            _put_str(buf, name)
            _put_dims(buf, arr.shape)
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"checkpoint truncated at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def dims(self) -> tuple[int, ...]:
        (nd,) = self.unpack("<I")
        return tuple(self.unpack(f"<{nd}I"))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def _empty_block(cls, in_spec, out_spec, extra):
    if cls is ConvUnit:
        return ConvUnit(in_spec, out_spec[0])
    if cls is FCUnit:
        return FCUnit(in_spec[0], out_spec[0], dropout=extra / 1e6)
    if cls is Linear:
        return Linear(in_spec[0], out_spec[0])
    if cls is DenseAdapter:
        return DenseAdapter(in_spec, out_spec[0], depth=extra)
    return ChannelProjectAdapter(in_spec, out_spec, depth=extra)


def loads(data: bytes) -> Model:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagic("not a PFHR checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    input_spec = r.dims()
    template = r.string() or None
    (count,) = r.unpack("<I")
    blocks = []
    for _ in range(count):
        tag, prov_tag, cid, lidx, extra = r.unpack("<BBiiI")
        if tag not in _TAG_BLOCKS or prov_tag not in _TAG_PROV:
            raise CheckpointError(f"unknown block tag {tag}/{prov_tag}")
        cls = _TAG_BLOCKS[tag]
        block = _empty_block(cls, r.dims(), r.dims(), extra)
        block.provenance = Provenance(_TAG_PROV[prov_tag], cid, lidx)
        (nt,) = r.unpack("<I")
        for _ in range(nt):
            name = r.string()
            shape = r.dims()
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(r.take(4 * size), dtype="<f4").astype(DTYPE).reshape(shape)
            target = block.buffers if name.startswith("running_") else block.params
            target[name] = arr.copy()
        block.zero_grad()
        blocks.append(block)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint")
    head = None
    if blocks and isinstance(blocks[-1], Linear):
        head = blocks.pop()
    return Model(blocks, head, input_spec, template=template)


def save(model: Model, path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path) -> Model:
    return loads(Path(path).read_bytes())
