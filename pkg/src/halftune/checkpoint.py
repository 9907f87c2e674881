"""Single-file checkpoint container.

Layout::

    u64 little-endian  header length N
    N bytes            UTF-8 JSON header, space-padded so the payload starts
                       on a 64-byte boundary
    payload            raw little-endian tensor buffers, each at a 64-byte
                       aligned offset relative to the payload start

The header lists every tensor with its category, layer, shape, dtype, byte
offset, byte length and a CRC-64/XZ of its buffer. Keys are sorted and no
timestamps are written, so identical inputs give identical files.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from fastcrc import crc64

from .model import Model, ModelConfig, ParameterRegistry
from .selection import SelectionHistory
from .tensor import DTYPES, dtype_name

FORMAT_VERSION = 1
ALIGN = 64
_PREFIX = struct.Struct("<Q")


class CheckpointError(IOError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class DtypeMismatchError(CheckpointError):
    pass


def crc64_xz(buf: bytes) -> int:
    return crc64.xz(bytes(buf))


def _pad(n: int) -> int:
    return -n % ALIGN


@dataclass
class Checkpoint:
    registry: ParameterRegistry
    config: ModelConfig | None
    history: SelectionHistory
    metadata: dict = field(default_factory=dict)

    @property
    def model(self) -> Model:
        if self.config is None:
            raise CheckpointError("checkpoint carries no model_config")
        return Model(self.config, self.registry)


def _buffer(arr: np.ndarray) -> bytes:
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return np.ascontiguousarray(le).tobytes()


def encode(registry: ParameterRegistry, config: ModelConfig | None = None,
           history: SelectionHistory | None = None, metadata: dict | None = None) -> bytes:
    index, buffers, offset = {}, [], 0
    for e in registry:
        arr = e.tensor.data
        if not np.isfinite(arr).all():
            raise CheckpointError(f"refusing to save non-finite values in {e.name}")
        buf = _buffer(arr)
        index[e.name] = {"category": e.category, "layer": e.layer, "shape": list(arr.shape),
                         "dtype": dtype_name(arr.dtype), "byte_offset": offset,
                         "byte_length": len(buf), "crc64": crc64_xz(buf)}
        buffers.append(buf)
        offset += len(buf)
        pad = _pad(offset)
        buffers.append(b"\0" * pad)
        offset += pad
    header = {"format_version": FORMAT_VERSION,
              "model_config": config.to_dict() if config is not None else None,
              "tensor_order": registry.names(),
              "tensors": index,
              "selection_history": (history or SelectionHistory()).to_json(),
              "run_metadata": metadata or {}}
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    text += b" " * _pad(_PREFIX.size + len(text))
    return _PREFIX.pack(len(text)) + text + b"".join(buffers)


def save_checkpoint(model, history: SelectionHistory | None, metadata: dict | None, path) -> int:
    """Write ``model`` (a Model or bare registry) to ``path``; returns the byte count.

    The file is written to a temporary sibling and renamed into place.
    """
    if isinstance(model, ParameterRegistry):
        registry, config = model, None
    else:
        registry, config = model.registry, model.config
    data = encode(registry, config, history, metadata)
    tmp = f"{os.fspath(path)}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return len(data)


def decode(data: bytes, dtype: str | None = None, convert: bool = False) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise TruncatedError("file shorter than the header length prefix")
    (n,) = _PREFIX.unpack_from(data)
    start = _PREFIX.size + n
    if len(data) < start:
        raise TruncatedError(f"header needs {n} bytes, file has {len(data) - _PREFIX.size}")
    try:
        header = json.loads(data[_PREFIX.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"format_version {version!r} is not supported (reader is v{FORMAT_VERSION})")
    if dtype is not None and dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    payload = memoryview(data)[start:]
    registry = ParameterRegistry()
    for name in header["tensor_order"]:
        meta = header["tensors"][name]
        off, length = meta["byte_offset"], meta["byte_length"]
        if off % ALIGN:
            raise CheckpointError(f"{name}: offset {off} is not {ALIGN}-byte aligned")
        if off + length > len(payload):
            raise TruncatedError(f"{name}: payload ends at byte {len(payload)}, tensor needs {off + length}")
        buf = payload[off:off + length]
        if crc64_xz(buf) != meta["crc64"]:
            raise ChecksumError(f"{name}: checksum mismatch")
        stored = np.dtype(DTYPES[meta["dtype"]]).newbyteorder("<")
        count = math.prod(meta["shape"])
        if count * stored.itemsize != length:
            raise CheckpointError(f"{name}: byte_length {length} does not match shape {meta['shape']}")
        arr = np.frombuffer(buf, dtype=stored).reshape(meta["shape"]).astype(DTYPES[meta["dtype"]])
        if dtype is not None and meta["dtype"] != dtype:
            if not convert:
                raise DtypeMismatchError(f"{name} is stored as {meta['dtype']}, requested {dtype}; "
                                         "pass convert=True to cast")
            arr = arr.astype(DTYPES[dtype])
        registry.add(name, meta["category"], meta["layer"], arr)

    config = None
    if header.get("model_config") is not None:
        cfg = dict(header["model_config"])
        if dtype is not None:
            cfg["dtype"] = dtype
        config = ModelConfig(**cfg)
    history = SelectionHistory.from_json(header.get("selection_history", []), registry.names())
    return Checkpoint(registry, config, history, header.get("run_metadata", {}))


def load_checkpoint(path, dtype: str | None = None, convert: bool = False) -> Checkpoint:
    """Read a checkpoint; ``dtype`` requests a session dtype (casting needs ``convert``)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(data, dtype, convert)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise TruncatedError("file shorter than the header length prefix")
        (n,) = _PREFIX.unpack(prefix)
        text = fh.read(n)
    if len(text) < n:
        raise TruncatedError("header truncated")
    return json.loads(text.decode())
