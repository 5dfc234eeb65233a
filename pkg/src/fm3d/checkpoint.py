"""The ``FM3D`` checkpoint container.

Layout, all integers little-endian::

    b"FM3D"                     magic
    u32 version                 FORMAT_VERSION
    u8  grad_mode               0 = sum, 1 = average
    u32 len, bytes              UTF-8 JSON metadata (sorted keys)
    u32 count                   number of tensors, then for each:
        u16 len, bytes          UTF-8 name
        u8  dtype               1 = float64, 2 = float32
        u8  ndim
        u32 * ndim              dims
        raw little-endian data

Tensor names are ``param/<parameter>`` and ``momentum/<parameter>``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, DimMismatch, TruncatedFile, VersionMismatch

MAGIC = b"FM3D"
FORMAT_VERSION = 1
_MODES = {"sum": 0, "average": 1}
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype("float64"): 1, np.dtype("float32"): 2}


@dataclass
class Checkpoint:
    grad_mode: str
    meta: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def params(self):
        return {k[len("param/"):]: v for k, v in self.tensors.items() if k.startswith("param/")}

    def momentum(self):
        return {k[len("momentum/"):]: v for k, v in self.tensors.items()
                if k.startswith("momentum/")}


def encode(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<IB", ckpt.version, _MODES[ckpt.grad_mode]))
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    out.write(struct.pack("<I", len(meta)))
    out.write(meta)
    out.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw_name)))
        out.write(raw_name)
        out.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=_DTYPES[_DTYPE_CODES[arr.dtype]]).tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise TruncatedFile(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(blob: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise BadMagic(f"{path}: not an FM3D checkpoint")
    version, mode = r.unpack("<IB")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    modes = {v: k for k, v in _MODES.items()}
    if mode not in modes:
        raise BadMagic(f"{path}: unknown grad mode code {mode}")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise BadMagic(f"{path}: tensor {name} has unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}I")
        dtype = _DTYPES[code]
        size = int(np.prod(dims)) * dtype.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dtype).reshape(dims).astype(
            dtype.newbyteorder("="))
    if r.pos != len(blob):
        raise BadMagic(f"{path}: {len(blob) - r.pos} trailing bytes")
    return Checkpoint(modes[mode], meta, tensors, version)


def save_checkpoint(path, model, grad_mode, momentum=None, meta=None):
    """Write ``model`` parameters (and optimizer ``momentum`` buffers) to ``path``."""
    tensors = {f"param/{k}": v for k, v in model.parameters().items()}
    for k, v in (momentum or {}).items():
        tensors[f"momentum/{k}"] = v
    blob = encode(Checkpoint(grad_mode, dict(meta or {}), tensors))
    Path(path).write_bytes(blob)
    return blob


def load_checkpoint(path, model=None) -> Checkpoint:
    """Read a checkpoint; with ``model``, check dims and copy the parameters in."""
    path = Path(path)
    ckpt = decode(path.read_bytes(), str(path))
    if model is not None:
        restore(ckpt, model)
    return ckpt


def check_tensors(found: dict, expected: dict, what="parameter"):
    for name, arr in expected.items():
        if name not in found:
            raise DimMismatch(f"checkpoint has no {what} for layer '{name}'")
        if found[name].shape != arr.shape:
            raise DimMismatch(f"layer '{name}': checkpoint {what} has dims {found[name].shape}, "
                              f"model expects {arr.shape}")
    extra = sorted(set(found) - set(expected))
    if extra:
        raise DimMismatch(f"checkpoint has {what}s for unknown layers {extra}")


def restore(ckpt: Checkpoint, model, momentum=None):
    params = model.parameters()
    saved = ckpt.params()
    check_tensors(saved, params)
    for name, arr in params.items():
        np.copyto(arr, saved[name])
    if momentum is not None:
        buffers = ckpt.momentum()
        if buffers:
            check_tensors(buffers, momentum, "momentum buffer")
            for name, arr in momentum.items():
                np.copyto(arr, buffers[name])
