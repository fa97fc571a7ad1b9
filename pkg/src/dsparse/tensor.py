"""Tensor storage, deterministic RNG and the DST1 tensor file format.

Tensors are plain numpy arrays. The only storage type numpy does not have
natively is packed signed 4-bit, which :class:`Int4Array` provides.

DST1 layout (all integers little-endian)::

    b"DST1" | u32 version=1 | u32 count
    per tensor:
        u32 name_len | name (utf-8) | u8 dtype | u8 rank | rank x u64 dims
        | u64 nbytes | zero padding to a 64-byte file offset | raw data

dtype codes: 0=float32, 1=float16, 2=int4-packed, 3=int32.
"""

from __future__ import annotations

import os
import struct
from collections.abc import Iterable, Mapping
from dataclasses import dataclass

import numpy as np

from .exceptions import BadMagic, NameCollision, TruncatedFile, UnknownDtypeCode

MAGIC = b"DST1"
VERSION = 1
ALIGN = 64

DTYPE_FLOAT32 = 0
DTYPE_FLOAT16 = 1
DTYPE_INT4 = 2
DTYPE_INT32 = 3

_NUMPY_CODES = {
    np.dtype("<f4"): DTYPE_FLOAT32,
    np.dtype("<f2"): DTYPE_FLOAT16,
    np.dtype("<i4"): DTYPE_INT32,
}
_CODE_NUMPY = {v: k for k, v in _NUMPY_CODES.items()}


def pack_int4(codes) -> np.ndarray:
    """Pack signed 4-bit codes along the last axis, low nibble first.

    An odd trailing code is padded with a zero nibble. Returns uint8 with the
    last axis of length ``ceil(n / 2)``.
    """
    codes = np.asarray(codes)
    if codes.size and (codes.min() < -8 or codes.max() > 7):
        raise ValueError("int4 codes must lie in [-8, 7]")
    nib = (codes.astype(np.int16) & 0xF).astype(np.uint8)
    if nib.shape[-1] % 2:
        pad = np.zeros(nib.shape[:-1] + (1,), dtype=np.uint8)
        nib = np.concatenate([nib, pad], axis=-1)
    return (nib[..., 0::2] | (nib[..., 1::2] << 4)).astype(np.uint8)


def unpack_int4(packed, n: int) -> np.ndarray:
    """Inverse of :func:`pack_int4`; returns int8 codes with last axis ``n``."""
    packed = np.asarray(packed, dtype=np.uint8)
    lo = (packed & 0xF).astype(np.int8)
    hi = (packed >> 4).astype(np.int8)
    out = np.empty(packed.shape[:-1] + (packed.shape[-1] * 2,), dtype=np.int8)
    out[..., 0::2] = lo
    out[..., 1::2] = hi
    out = out[..., :n]
    # sign-extend the 4-bit two's complement nibble
    return np.where(out > 7, out - 16, out).astype(np.int8)


@dataclass(frozen=True, eq=False)
class Int4Array:
    """Signed 4-bit tensor packed two codes per byte over the flattened data."""

    shape: tuple
    data: bytes

    @classmethod
    def from_codes(cls, codes) -> "Int4Array":
        codes = np.asarray(codes)
        return cls(tuple(int(d) for d in codes.shape), pack_int4(codes.reshape(-1)).tobytes())

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def nbytes(self) -> int:
        return (self.size + 1) // 2

    def codes(self) -> np.ndarray:
        flat = unpack_int4(np.frombuffer(self.data, dtype=np.uint8), self.size)
        return flat.reshape(self.shape)

    def __eq__(self, other):
        if not isinstance(other, Int4Array):
            return NotImplemented
        return self.shape == other.shape and self.data == other.data

    def __repr__(self):
        return f"Int4Array(shape={self.shape}, nbytes={self.nbytes})"


def _encode(tensor):
    if isinstance(tensor, Int4Array):
        if len(tensor.data) != tensor.nbytes:
            raise ValueError("Int4Array payload does not match its shape")
        return DTYPE_INT4, tensor.shape, tensor.data
    arr = np.asarray(tensor)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _NUMPY_CODES:
        raise TypeError(f"unsupported tensor dtype {arr.dtype}")
    arr = np.asarray(arr, dtype=dt, order="C")  # ascontiguousarray would promote 0-d to 1-d
    return _NUMPY_CODES[dt], arr.shape, arr.tobytes()


def _items(tensors) -> list:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    seen = set()
    for name, _ in items:
        if not isinstance(name, str) or not name:
            raise ValueError("tensor names must be non-empty strings")
        if name in seen:
            raise NameCollision(f"duplicate tensor name {name!r}")
        seen.add(name)
    return items


def dumps_tensors(tensors: Mapping | Iterable) -> bytes:
    """Serialize named tensors to DST1 bytes."""
    items = _items(tensors)
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(items))
    for name, tensor in items:
        code, shape, raw = _encode(tensor)
        bname = name.encode("utf-8")
        buf += struct.pack("<I", len(bname)) + bname
        buf += struct.pack("<BB", code, len(shape))
        buf += struct.pack(f"<{len(shape)}Q", *shape)
        buf += struct.pack("<Q", len(raw))
        buf += b"\0" * (-len(buf) % ALIGN)
        buf += raw
    return bytes(buf)


def save_tensors(path: str | os.PathLike, tensors: Mapping | Iterable) -> None:
    """Write named tensors to ``path`` in DST1 format.

    ``tensors`` is a mapping or an iterable of ``(name, tensor)`` pairs; the
    latter form is checked for duplicate names.
    """
    payload = dumps_tensors(tensors)
    with open(path, "wb") as fh:
        fh.write(payload)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads_tensors(data: bytes) -> dict:
    """Parse DST1 bytes into an ordered ``{name: tensor}`` dict."""
    rd = _Reader(data)
    if len(data) < 4 or rd.take(4) != MAGIC:
        raise BadMagic("not a DST1 file")
    version, count = rd.unpack("<II")
    if version != VERSION:
        raise BadMagic(f"unsupported DST1 version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = rd.unpack("<I")
        name = rd.take(name_len).decode("utf-8")
        code, rank = rd.unpack("<BB")
        shape = tuple(int(d) for d in rd.unpack(f"<{rank}Q"))
        (nbytes,) = rd.unpack("<Q")
        rd.take(-rd.pos % ALIGN)
        raw = rd.take(nbytes)
        if code == DTYPE_INT4:
            tensor = Int4Array(shape, bytes(raw))
            if tensor.nbytes != nbytes:
                raise TruncatedFile(f"tensor {name!r}: byte length does not match shape")
        elif code in _CODE_NUMPY:
            dt = _CODE_NUMPY[code]
            if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
                raise TruncatedFile(f"tensor {name!r}: byte length does not match shape")
            tensor = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        else:
            raise UnknownDtypeCode(f"tensor {name!r}: dtype code {code}")
        if name in out:
            raise NameCollision(f"duplicate tensor name {name!r} in file")
        out[name] = tensor
    return out


def load_tensors(path: str | os.PathLike) -> dict:
    """Read a DST1 file. float16 tensors come back as float16 (widen at use)."""
    with open(path, "rb") as fh:
        return loads_tensors(fh.read())


# -- RNG ---------------------------------------------------------------------


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox-backed generator for ``seed``, optionally split by stream keys.

    Philox is counter-based and SeedSequence hashing is integer-only, so the
    stream is identical on every platform.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def randn(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard-normal float32 tensor drawn from ``rng``."""
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    if not shape:
        raise ValueError("shape must be non-empty")
    return rng.standard_normal(shape, dtype=np.float32)
