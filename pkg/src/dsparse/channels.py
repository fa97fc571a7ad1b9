from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ChannelOutOfRange

MODES = ("random", "q_outlier", "k_outlier", "qk_outlier")
MODE_ALIASES = {"random": "random", "q": "q_outlier", "k": "k_outlier", "qk": "qk_outlier"}


def normalize_mode(mode: str) -> str:
    """Accept both short (``qk``) and long (``qk_outlier``) mode names."""
    if mode in MODES:
        return mode
    try:
        return MODE_ALIASES[mode]
    except KeyError:
        raise ValueError(f"unknown calibration mode {mode!r}; expected one of {sorted(MODE_ALIASES)}") from None


@dataclass(frozen=True, eq=False)
class ChannelSet:
    """Outlier channels used to build one KV head's label cache.

    ``indices`` is sorted ascending. ``ranking`` optionally holds every channel
    of the head in decreasing importance, which lets overlap analysis truncate
    the offline set to any size.
    """

    indices: np.ndarray
    mode: str = "qk_outlier"
    layer: int = 0
    head: int = 0
    ranking: np.ndarray | None = field(default=None)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if idx.size == 0:
            raise ValueError("a channel set needs at least one channel")
        if np.any(idx < 0):
            raise ChannelOutOfRange(f"negative channel index in {idx.tolist()}")
        if len(np.unique(idx)) != idx.size:
            raise ValueError(f"channel indices must be distinct, got {idx.tolist()}")
        object.__setattr__(self, "indices", np.sort(idx))
        if self.ranking is not None:
            object.__setattr__(self, "ranking", np.asarray(self.ranking, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "mode", normalize_mode(self.mode))

    @property
    def r(self) -> int:
        return int(self.indices.size)

    def check(self, d_h: int) -> None:
        if self.indices[-1] >= d_h:
            raise ChannelOutOfRange(f"channel {int(self.indices[-1])} out of range for d_h={d_h}")

    def top(self, n: int) -> np.ndarray:
        """The ``n`` most important channels (needs ``ranking`` when n > r)."""
        if self.ranking is not None:
            return self.ranking[:n]
        if n > self.r:
            raise ValueError("channel set has no full ranking to extend beyond r")
        return self.indices[:n]

    def __eq__(self, other):
        if not isinstance(other, ChannelSet):
            return NotImplemented
        return (
            np.array_equal(self.indices, other.indices)
            and self.mode == other.mode
            and self.layer == other.layer
            and self.head == other.head
        )

    def __repr__(self):
        return f"ChannelSet(layer={self.layer}, head={self.head}, mode={self.mode!r}, indices={self.indices.tolist()})"


def full_channel_set(d_h: int, layer: int = 0, head: int = 0) -> ChannelSet:
    return ChannelSet(np.arange(d_h), mode="random", layer=layer, head=head, ranking=np.arange(d_h))
