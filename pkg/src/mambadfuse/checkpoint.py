"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"MDFZ"  u32 version
    u32 header_len, header_len bytes of UTF-8 JSON {"arch": ..., "precision": ..., "meta": ...}
    tensor table: u32 count, then per tensor
        u16 name_len, name, u8 dtype code, u8 ndim, ndim x u32 dims, u64 nbytes, raw data
    u8 has_adam; if 1: u64 step, then a tensor table of moments named "m:<p>" / "v:<p>"
    32-byte SHA-256 of everything before it
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ArchConfig, ModelParams, init_model, named_parameters

MAGIC = b"MDFZ"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class AdamState:
    """Per-parameter first/second moments keyed by parameter name."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Checkpoint:
    model: ModelParams
    adam: AdamState | None
    meta: dict


def _write_table(buf: io.BytesIO, items: list[tuple[str, np.ndarray]]) -> None:
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODE_OF:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<BB", _CODE_OF[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def table(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (ln,) = self.unpack("<H")
            name = self.take(ln).decode()
            code, ndim = self.unpack("<BB")
            if code not in _DTYPE_CODES:
                raise CheckpointError(f"tensor {name}: unknown dtype code {code}")
            shape = self.unpack(f"<{ndim}I")
            (nbytes,) = self.unpack("<Q")
            dt = _DTYPE_CODES[code]
            if nbytes != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
                raise CheckpointError(f"tensor {name}: byte count does not match shape {shape}")
            if name in out:
                raise CheckpointError(f"tensor {name} appears twice")
            out[name] = np.frombuffer(self.take(nbytes), dtype=dt).reshape(shape).copy()
        return out


def to_bytes(model: ModelParams, adam: AdamState | None = None, meta: dict | None = None) -> bytes:
    params = named_parameters(model)
    precision = "fp64" if params[0][1].dtype == np.float64 else "fp32"
    header = {"arch": dataclasses.asdict(model.config), "precision": precision, "meta": meta or {}}
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", VERSION))
    hb = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(hb)) + hb)
    _write_table(buf, [(n, t.data) for n, t in params])
    if adam is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01" + struct.pack("<Qddd", adam.step, adam.beta1, adam.beta2, adam.eps))
        items = [(f"m:{k}", v) for k, v in adam.m.items()] + [(f"v:{k}", v) for k, v in adam.v.items()]
        _write_table(buf, items)
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 8 + 32 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: file is corrupt or truncated")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hl,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hl))
        arch = ArchConfig(**header["arch"])
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from exc
    tensors = r.table()
    model = init_model(arch, seed=0, precision=header.get("precision", "fp32"))
    params = dict(named_parameters(model))
    unknown = sorted(tensors.keys() - params.keys())
    missing = sorted(params.keys() - tensors.keys())
    if unknown:
        raise CheckpointError(f"unknown tensor names: {', '.join(unknown)}")
    if missing:
        raise CheckpointError(f"missing tensors: {', '.join(missing)}")
    for name, t in params.items():
        arr = tensors[name]
        if arr.shape != t.shape or arr.dtype != t.dtype:
            raise CheckpointError(f"tensor {name}: stored {arr.dtype}{arr.shape}, model expects {t.dtype}{t.shape}")
        t.data = arr
    adam = None
    (has_adam,) = r.unpack("<B")
    if has_adam:
        step, b1, b2, eps = r.unpack("<Qddd")
        moments = r.table()
        adam = AdamState(step=step, beta1=b1, beta2=b2, eps=eps)
        for key, arr in moments.items():
            kind, _, name = key.partition(":")
            if kind not in ("m", "v") or name not in params:
                raise CheckpointError(f"unknown optimizer entry {key}")
            getattr(adam, kind)[name] = arr
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(model, adam, header.get("meta", {}))


def save_checkpoint(path, model: ModelParams, adam: AdamState | None = None, meta: dict | None = None) -> None:
    """Write atomically: a partial file never replaces a good checkpoint."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model, adam, meta))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data)
