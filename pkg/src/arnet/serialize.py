"""Flat little-endian binary containers for tensors and checkpoints.

Tensor record::

    b"ARNT" | u32 version | u8 dtype tag | 4 x u64 shape | payload

Checkpoint::

    b"ARNK" | u32 version | u32 manifest bytes | manifest (utf-8 ``key = value`` lines)
            | u32 entry count | entries

where each entry is ``u32 name bytes | name | tensor record``. Arrays of rank
below 4 are stored with their shape right-padded by ones and restored to the
shape the loader asks for.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"ARNT"
CHECKPOINT_MAGIC = b"ARNK"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class FormatError(ValueError):
    pass


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    pos = f.tell()
    b = f.read(n)
    if len(b) != n:
        raise FormatError(f"truncated {what} at byte {pos}: expected {n} bytes, got {len(b)}")
    return b


def write_tensor(f: BinaryIO, arr: np.ndarray):
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_TAGS:
        raise FormatError(f"unsupported dtype {arr.dtype}; only float32/float64 are serialized")
    if arr.ndim > 4:
        raise FormatError(f"rank {arr.ndim} exceeds the 4-d container")
    shape = tuple(arr.shape) + (1,) * (4 - arr.ndim)
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<IB4Q", VERSION, _DTYPE_TAGS[dt], *shape))
    f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    pos = f.tell()
    magic = _read_exact(f, 4, "tensor magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r} at byte {pos}")
    version, tag, *shape = struct.unpack("<IB4Q", _read_exact(f, struct.calcsize("<IB4Q"), "tensor header"))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if tag not in _TAG_DTYPES:
        raise FormatError(f"unknown dtype tag {tag} at byte {pos + 8}")
    dt = _TAG_DTYPES[tag]
    count = int(np.prod(shape))
    payload = _read_exact(f, count * dt.itemsize, "tensor payload")
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save_tensor(path, arr):
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def _manifest_text(manifest: dict) -> str:
    return "".join(f"{k} = {manifest[k]}\n" for k in sorted(manifest))


def parse_manifest(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def save_checkpoint(path, tensors: dict, manifest: dict | None = None):
    """Write named arrays (in sorted name order) plus a text manifest."""
    buf = io.BytesIO()
    text = _manifest_text(manifest or {}).encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", VERSION, len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        write_tensor(buf, tensors[name])
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, manifest)``; tensors keep their padded 4-d shapes."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "checkpoint magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
        version, mlen = struct.unpack("<II", _read_exact(f, 8, "checkpoint header"))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        manifest = parse_manifest(_read_exact(f, mlen, "manifest").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(f, 4, "entry count"))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            tensors[name] = read_tensor(f)
    return tensors, manifest
