"""Single-token decode attention: the exact oracle and the Double Sparsity path.

Double Sparsity decode in six steps:

1. restrict the query to the calibrated channels ``C``
2. approximate scores ``s_hat = K_label @ q[C]`` (no 1/sqrt(d_h) scaling)
3. ``i = argtopk(s_hat, k)``, ascending
4. ``s = softmax(K[i] @ q / sqrt(d_h))``
5. ``y = s @ V[i]``
6. return ``y``
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channels import ChannelSet
from .exceptions import ChannelOutOfRange, IndexOutOfRange, KTooLarge, ShapeMismatch
from .label_cache import LabelCacheHead
from .traffic import TrafficLedger, charge_ds_decode


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SparsityConfig:
    """Channel fraction ``alpha`` and token fraction ``beta``, both in (0, 1]."""

    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (0 < v <= 1):
                raise ValueError(f"{name} must lie in (0, 1], got {v}")

    def r(self, d_h: int) -> int:
        return min(d_h, max(1, round_half_up(self.alpha * d_h)))

    def k(self, S: int) -> int:
        return min(S, max(1, round_half_up(self.beta * S)))


@dataclass(frozen=True)
class TopkResult:
    indices: np.ndarray
    approx_scores: np.ndarray


def _check_qkv(q, K, V):
    q = np.asarray(q, dtype=np.float32)
    K = np.asarray(K, dtype=np.float32)
    V = np.asarray(V, dtype=np.float32)
    if q.ndim != 1 or K.ndim != 2 or K.shape != V.shape or K.shape[1] != q.shape[0]:
        raise ShapeMismatch(f"need q [d_h], K/V [S, d_h]; got {q.shape}, {K.shape}, {V.shape}")
    if K.shape[0] < 1:
        raise ShapeMismatch("attention needs at least one token")
    return q, K, V


def softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def exact_scores(q, K) -> np.ndarray:
    """Unscaled ``K @ q``, laid out exactly like :func:`approx_scores` so that a
    full-channel, unquantized label cache reproduces it bit for bit."""
    return np.ascontiguousarray(K, dtype=np.float32) @ np.ascontiguousarray(q, dtype=np.float32)


def attend(q, K_sel, V_sel, return_weights: bool = False):
    """softmax(K_sel q / sqrt(d_h)) V_sel over the rows given."""
    w = softmax(exact_scores(q, K_sel) / np.float32(math.sqrt(q.shape[0])))
    y = (w @ V_sel).astype(np.float32)
    return (y, w) if return_weights else y


def full_attention(q, K, V, return_weights: bool = False):
    """Exact decode attention over every cached token."""
    q, K, V = _check_qkv(q, K, V)
    return attend(q, K, V, return_weights=return_weights)


def approx_scores(q, channels: ChannelSet, label: LabelCacheHead) -> np.ndarray:
    q = np.asarray(q, dtype=np.float32)
    if channels.indices[-1] >= q.shape[0]:
        raise ChannelOutOfRange(f"channel {int(channels.indices[-1])} out of range for d_h={q.shape[0]}")
    return exact_scores(q[channels.indices], label.values())


def argtopk(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties to the lower index, sorted ascending."""
    scores = np.asarray(scores)
    S = scores.shape[0]
    if k > S:
        raise KTooLarge(f"k={k} exceeds S={S}")
    if k < 1:
        raise ValueError("k must be positive")
    if k == S:
        return np.arange(S, dtype=np.int64)
    # stable sort on the negated scores keeps lower indices first among equals
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def ds_decode(
    q,
    K,
    V,
    channels: ChannelSet,
    label: LabelCacheHead,
    cfg: SparsityConfig,
    ledger: TrafficLedger | None = None,
    force_indices=None,
) -> tuple[np.ndarray, TopkResult]:
    """Double Sparsity decode for one query token and one head.

    ``force_indices`` overrides the top-k choice; it exists so tests can pin
    the selection and compare the attend step against an oracle.
    """
    q, K, V = _check_qkv(q, K, V)
    S, d_h = K.shape
    if label.S != S:
        raise ShapeMismatch(f"label cache has {label.S} rows, KV cache has {S}")
    s_hat = approx_scores(q, channels, label)
    if force_indices is None:
        idx = argtopk(s_hat, cfg.k(S))
    else:
        idx = _check_indices(force_indices, S)
    y = attend(q, K[idx], V[idx])
    if ledger is not None:
        charge_ds_decode(ledger, S, d_h, channels.r, idx.size)
    return y, TopkResult(idx, s_hat)


def _check_indices(indices, S: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise IndexOutOfRange("empty index list")
    if idx.min() < 0 or idx.max() >= S:
        raise IndexOutOfRange(f"indices must lie in [0, {S})")
    if np.unique(idx).size != idx.size:
        raise IndexOutOfRange("indices must be distinct")
    return np.sort(idx)


def truncated_attention_oracle(q, K, V, indices) -> np.ndarray:
    """Exact attention restricted to ``indices``; isolates attend error from selection error."""
    q, K, V = _check_qkv(q, K, V)
    idx = _check_indices(indices, K.shape[0])
    return attend(q, K[idx], V[idx])


def causal_attention(Q, K, V) -> np.ndarray:
    """Row t of the result equals ``full_attention(Q[t], K[:t+1], V[:t+1])``.

    Q, K, V are ``[T, d_h]``. Vectorized over rows for prefill.
    """
    T, d_h = Q.shape
    scores = (Q @ K.T) / np.float32(math.sqrt(d_h))
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores = np.where(mask, np.float32(-np.inf), scores)
    return (softmax(scores) @ V).astype(np.float32)
