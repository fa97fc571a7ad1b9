"""KV cache and the 4-bit label cache that shadows it.

The label cache keeps only the calibrated outlier channels of every key row,
symmetrically quantized per row to codes in [-7, 7] with one float32 scale.
Codes are held packed, two per byte, one padded byte-row per token.
"""

from __future__ import annotations

import numpy as np

from .channels import ChannelSet
from .exceptions import CapacityExceeded, NonFiniteInput, ShapeMismatch
from .tensor import Int4Array, pack_int4, unpack_int4

QMAX = 7


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_rows_4bit(rows) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`quantize_row_4bit` over the last axis.

    Returns ``(codes int8 [..., r], scales float32 [...])``.
    """
    rows = np.asarray(rows, dtype=np.float32)
    if not np.all(np.isfinite(rows)):
        raise NonFiniteInput("cannot quantize non-finite values")
    amax = np.max(np.abs(rows), axis=-1)
    scales = (amax / np.float32(QMAX)).astype(np.float32)
    # all-zero rows, and rows so tiny their scale underflows, get scale 1 (codes 0)
    scales = np.where(scales > 0, scales, np.float32(1.0)).astype(np.float32)
    # float64 division keeps |x/scale - code| <= 1/2 exact, so the error bound is scale/2
    ratio = rows.astype(np.float64) / scales.astype(np.float64)[..., None]
    codes = np.clip(_round_half_away(ratio), -QMAX, QMAX).astype(np.int8)
    return codes, scales


def quantize_row_4bit(row) -> tuple[np.ndarray, float]:
    """Symmetric 4-bit quantization of one row: ``scale = max|row| / 7``.

    All-zero rows get ``scale = 1``. Codes are ``round-half-away(row / scale)``
    clamped to [-7, 7].
    """
    row = np.asarray(row, dtype=np.float32)
    if row.ndim != 1 or row.size < 1:
        raise ShapeMismatch("expected a non-empty 1-D row")
    codes, scales = quantize_rows_4bit(row[None, :])
    return codes[0], float(scales[0])


def dequantize(codes, scales) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.float32)
    return codes * np.asarray(scales, dtype=np.float32)[..., None]


class KvCacheHead:
    """Append-only K/V store for one (layer, KV head), preallocated to ``capacity`` rows."""

    def __init__(self, d_h: int, capacity: int = 1024, dtype=np.float32):
        self.d_h = int(d_h)
        self.capacity = int(capacity)
        self._K = np.zeros((self.capacity, self.d_h), dtype=dtype)
        self._V = np.zeros((self.capacity, self.d_h), dtype=dtype)
        self.S = 0

    @classmethod
    def from_arrays(cls, K, V, capacity: int | None = None) -> "KvCacheHead":
        K = np.asarray(K, dtype=np.float32)
        V = np.asarray(V, dtype=np.float32)
        if K.ndim != 2 or K.shape != V.shape:
            raise ShapeMismatch(f"K and V must share a 2-D shape, got {K.shape} and {V.shape}")
        cache = cls(K.shape[1], max(capacity or 0, K.shape[0], 1))
        cache._K[: K.shape[0]] = K
        cache._V[: K.shape[0]] = V
        cache.S = K.shape[0]
        return cache

    @property
    def K(self) -> np.ndarray:
        return self._K[: self.S]

    @property
    def V(self) -> np.ndarray:
        return self._V[: self.S]

    def append(self, k, v) -> None:
        if self.S >= self.capacity:
            raise CapacityExceeded(f"KV cache full at {self.capacity} rows")
        self._K[self.S] = k
        self._V[self.S] = v
        self.S += 1

    def gather(self, indices) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64)
        return self._K[idx], self._V[idx]


class LabelCacheHead:
    """Channel-restricted, optionally 4-bit copy of one KV head's keys."""

    def __init__(self, channels: ChannelSet, capacity: int = 1024, quantized: bool = True):
        self.channels = channels
        self.quantized = bool(quantized)
        self.capacity = int(capacity)
        r = channels.r
        if self.quantized:
            self._codes = np.zeros((self.capacity, (r + 1) // 2), dtype=np.uint8)
            self._scales = np.zeros(self.capacity, dtype=np.float32)
        # dequantized working copy used by scoring; rebuilt from codes only on append
        self._values = np.zeros((self.capacity, r), dtype=np.float32)
        self.S = 0

    @property
    def r(self) -> int:
        return self.channels.r

    @property
    def codes(self) -> np.ndarray:
        """Unpacked int8 codes ``[S, r]``."""
        self._require_quantized()
        return unpack_int4(self._codes[: self.S], self.r)

    @property
    def packed_codes(self) -> np.ndarray:
        self._require_quantized()
        return self._codes[: self.S]

    @property
    def scales(self) -> np.ndarray:
        self._require_quantized()
        return self._scales[: self.S]

    def values(self) -> np.ndarray:
        """Dequantized label rows ``[S, r]`` (verbatim key channels when unquantized)."""
        return self._values[: self.S]

    @property
    def nbytes(self) -> int:
        """Storage footprint: packed codes plus one float32 scale per row."""
        if self.quantized:
            return self.S * ((self.r + 1) // 2 + 4)
        return self.S * self.r * 4

    def _require_quantized(self):
        if not self.quantized:
            raise AttributeError("label cache was built with quantized=False")

    def _write(self, start: int, key_rows: np.ndarray) -> None:
        n = key_rows.shape[0]
        if start + n > self.capacity:
            raise CapacityExceeded(f"label cache full at {self.capacity} rows")
        sub = key_rows[:, self.channels.indices]
        if self.quantized:
            codes, scales = quantize_rows_4bit(sub)
            self._codes[start : start + n] = pack_int4(codes)
            self._scales[start : start + n] = scales
            self._values[start : start + n] = dequantize(codes, scales)
        else:
            self._values[start : start + n] = sub
        self.S = start + n

    def to_tensors(self, prefix: str = "") -> dict:
        """Named tensors for DST1 serialization."""
        out = {f"{prefix}channels": self.channels.indices.astype(np.int32)}
        if self.quantized:
            out[f"{prefix}codes"] = Int4Array.from_codes(self.codes)
            out[f"{prefix}scales"] = self.scales.copy()
        else:
            out[f"{prefix}values"] = self.values().copy()
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, prefix: str = "", layer: int = 0, head: int = 0, mode: str = "qk_outlier"):
        channels = ChannelSet(tensors[f"{prefix}channels"], mode=mode, layer=layer, head=head)
        quantized = f"{prefix}codes" in tensors
        if quantized:
            codes = tensors[f"{prefix}codes"].codes()
            scales = np.asarray(tensors[f"{prefix}scales"], dtype=np.float32)
            S = codes.shape[0]
        else:
            values = np.asarray(tensors[f"{prefix}values"], dtype=np.float32)
            S = values.shape[0]
        cache = cls(channels, capacity=max(S, 1), quantized=quantized)
        if quantized:
            cache._codes[:S] = pack_int4(codes)
            cache._scales[:S] = scales
            cache._values[:S] = dequantize(codes, scales)
        else:
            cache._values[:S] = values
        cache.S = S
        return cache


def build_label_cache(K, channels: ChannelSet, quantized: bool = True, capacity: int | None = None) -> LabelCacheHead:
    """Label cache over all rows of ``K`` (the prefill path)."""
    K = np.asarray(K, dtype=np.float32)
    if K.ndim != 2:
        raise ShapeMismatch(f"K must be 2-D, got shape {K.shape}")
    channels.check(K.shape[1])
    cache = LabelCacheHead(channels, capacity=max(capacity or 0, K.shape[0], 1), quantized=quantized)
    if K.shape[0]:
        cache._write(0, K)
    return cache


def append_token(cache: LabelCacheHead, kv: KvCacheHead, new_k, new_v) -> None:
    """Decode-time append of one token to both the KV and label caches."""
    if cache.S != kv.S:
        raise ShapeMismatch(f"label cache has {cache.S} rows but KV cache has {kv.S}")
    new_k = np.asarray(new_k, dtype=np.float32).reshape(-1)
    if new_k.size != kv.d_h:
        raise ShapeMismatch(f"new key has {new_k.size} channels, cache expects {kv.d_h}")
    if cache.S >= cache.capacity or kv.S >= kv.capacity:
        raise CapacityExceeded("cannot append past preallocated capacity")
    cache._write(cache.S, new_k[None, :])
    kv.append(new_k, new_v)
