"""Analytical memory-traffic ledger.

Bytes are charged from closed-form access models, never measured. KV and
query elements are charged at float16 width regardless of the float32 compute
precision; label rows are charged as packed 4-bit codes plus one scale.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

COUNTERS = ("query_read", "label_read", "kv_gather_read", "full_kv_read", "host_to_device")


@dataclass
class TrafficLedger:
    """Per-source byte counters. Counters only grow until :meth:`reset`."""

    query_read: int = 0
    label_read: int = 0
    kv_gather_read: int = 0
    full_kv_read: int = 0
    host_to_device: int = 0
    elem_bytes: int = 2
    scale_bytes: int = 4

    @property
    def total(self) -> int:
        return sum(getattr(self, c) for c in COUNTERS)

    def reset(self) -> None:
        for c in COUNTERS:
            setattr(self, c, 0)

    def snapshot(self) -> dict:
        return {c: getattr(self, c) for c in COUNTERS}

    def delta(self, before: dict) -> dict:
        return {c: getattr(self, c) - before[c] for c in COUNTERS}

    def merge(self, other: "TrafficLedger") -> None:
        for c in COUNTERS:
            setattr(self, c, getattr(self, c) + getattr(other, c))

    def label_row_bytes(self, r: int) -> int:
        return (r + 1) // 2 + self.scale_bytes

    def to_dict(self) -> dict:
        out = self.snapshot()
        out["total"] = self.total
        return out


def full_attention_bytes(S: int, d_h: int, elem_bytes: int = 2) -> int:
    return d_h * elem_bytes + 2 * S * d_h * elem_bytes


def ds_decode_bytes(S: int, d_h: int, r: int, k: int, elem_bytes: int = 2, scale_bytes: int = 4) -> int:
    return d_h * elem_bytes + S * ((r + 1) // 2 + scale_bytes) + 2 * k * d_h * elem_bytes


def charge_full_attention(ledger: TrafficLedger, S: int, d_h: int) -> None:
    """Query read plus one full pass over K and V."""
    ledger.query_read += d_h * ledger.elem_bytes
    ledger.full_kv_read += 2 * S * d_h * ledger.elem_bytes


def charge_ds_decode(ledger: TrafficLedger, S: int, d_h: int, r: int, k: int) -> None:
    """Query read, every label row, and the ``k`` gathered K/V rows.

    The top-k selection itself is charged nothing: it runs on scores that are
    already on chip.
    """
    if r > d_h or k > S:
        raise ValueError(f"need r <= d_h and k <= S, got r={r}, d_h={d_h}, k={k}, S={S}")
    ledger.query_read += d_h * ledger.elem_bytes
    ledger.label_read += S * ledger.label_row_bytes(r)
    ledger.kv_gather_read += 2 * k * d_h * ledger.elem_bytes


def asymptotic_ratio(d_h: int, r: int, beta: float, elem_bytes: int = 2, scale_bytes: int = 4) -> float:
    """Limit of DS/full traffic as S grows: beta + label_row_bytes / (2 * d_h * elem_bytes)."""
    return beta + ((r + 1) // 2 + scale_bytes) / (2 * d_h * elem_bytes)


@dataclass(frozen=True)
class LabelAblationReport:
    S: int
    d_h: int
    r: int
    with_label_bytes: int
    without_label_bytes: int

    @property
    def ratio(self) -> float:
        return self.without_label_bytes / self.with_label_bytes if self.with_label_bytes else float("nan")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["ratio"] = self.ratio
        return out


def strided_scoring_bytes(S: int, d_h: int, channels, elem_bytes: int = 2, line_bytes: int = 128) -> int:
    """Bytes moved when approximate scoring reads ``channels`` straight out of K.

    Every token row touches whole memory lines; a row pays for each distinct
    line holding one of its channels. Reading every channel is one contiguous
    stream and pays for ``ceil(S * row_bytes / line_bytes)`` lines instead.
    """
    channels = sorted(set(int(c) for c in channels))
    row_bytes = d_h * elem_bytes
    if len(channels) == d_h:
        return -(-S * row_bytes // line_bytes) * line_bytes
    if row_bytes % line_bytes == 0:
        lines = len({(c * elem_bytes) // line_bytes for c in channels})
        return S * lines * line_bytes
    total = 0
    for t in range(S):
        base = t * row_bytes
        lines = {(base + c * elem_bytes) // line_bytes for c in channels}
        total += len(lines) * line_bytes
    return total


def label_ablation_report(
    S: int,
    d_h: int,
    r: int,
    channels=None,
    *,
    elem_bytes: int = 2,
    scale_bytes: int = 4,
    line_bytes: int = 128,
) -> LabelAblationReport:
    """Approximate-scoring bytes with a label cache versus strided reads of K.

    ``channels`` defaults to ``r`` channels spread evenly across the head so
    that, when the row spans several lines, as many lines as possible are hit.
    """
    if channels is None:
        channels = [int(i * d_h // r) for i in range(r)]
    if len(channels) != r:
        raise ValueError("len(channels) must equal r")
    with_label = S * ((r + 1) // 2 + scale_bytes)
    without = strided_scoring_bytes(S, d_h, channels, elem_bytes=elem_bytes, line_bytes=line_bytes)
    return LabelAblationReport(S=S, d_h=d_h, r=r, with_label_bytes=with_label, without_label_bytes=without)
