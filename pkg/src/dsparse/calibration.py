"""Offline outlier-channel calibration and offline/online overlap analysis.

Importance of channel ``j`` accumulates, per calibration sample (one query
token attending to its keys):

* ``q_outlier``:  ``|q[j]|``
* ``k_outlier``:  ``mean_t |K[t, j]|``
* ``qk_outlier``: ``mean_t |q[j] * K[t, j]|``
* ``random``:     nothing; channels are drawn from the RNG.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .attention import SparsityConfig, argtopk
from .channels import ChannelSet, normalize_mode
from .exceptions import EmptyDataset, EmptyStats, GqaIncompatible, ShapeMismatch
from .model import ToyModel, prefill
from .tensor import load_tensors, make_rng, save_tensors


@dataclass
class CalibrationStats:
    d_h: int
    importance: np.ndarray = field(default=None)
    n_samples: int = 0

    def __post_init__(self):
        if self.importance is None:
            self.importance = np.zeros(self.d_h, dtype=np.float64)


def accumulate_stats(stats: CalibrationStats, q, K, mode: str) -> None:
    """Add one query token's channel importance to ``stats``."""
    mode = normalize_mode(mode)
    q = np.asarray(q, dtype=np.float64)
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    if q.shape != (stats.d_h,) or K.shape[1] != stats.d_h or K.shape[0] < 1:
        raise ShapeMismatch(f"expected q [{stats.d_h}] and K [S, {stats.d_h}], got {q.shape}, {K.shape}")
    if mode == "q_outlier":
        stats.importance += np.abs(q)
    elif mode == "k_outlier":
        stats.importance += np.abs(K).mean(axis=0)
    elif mode == "qk_outlier":
        stats.importance += np.abs(q[None, :] * K).mean(axis=0)
    stats.n_samples += 1


def accumulate_causal(stats: CalibrationStats, Q, K, mode: str) -> None:
    """Equivalent to ``accumulate_stats(stats, Q[t], K[:t+1], mode)`` for every t.

    ``|q_j K_tj|`` factorizes into ``|q_j| |K_tj|``, so the causal means are
    prefix sums and the whole sequence is handled without a per-token loop.
    """
    mode = normalize_mode(mode)
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.ndim != 2 or Q.shape != K.shape or Q.shape[1] != stats.d_h:
        raise ShapeMismatch(f"expected Q and K of shape [T, {stats.d_h}], got {Q.shape}, {K.shape}")
    T = Q.shape[0]
    kmeans = np.cumsum(np.abs(K), axis=0) / np.arange(1, T + 1)[:, None]
    if mode == "q_outlier":
        stats.importance += np.abs(Q).sum(axis=0)
    elif mode == "k_outlier":
        stats.importance += kmeans.sum(axis=0)
    elif mode == "qk_outlier":
        stats.importance += (np.abs(Q) * kmeans).sum(axis=0)
    stats.n_samples += T


def rank_channels(importance) -> np.ndarray:
    """All channels by decreasing importance, ties to the lower index."""
    importance = np.asarray(importance)
    return np.argsort(-importance, kind="stable").astype(np.int64)


def select_channels(
    stats: CalibrationStats,
    r: int,
    mode: str,
    rng: np.random.Generator | None = None,
    layer: int = 0,
    head: int = 0,
) -> ChannelSet:
    """Top-``r`` channels by accumulated importance, or ``r`` random channels."""
    mode = normalize_mode(mode)
    if not 1 <= r <= stats.d_h:
        raise ValueError(f"r must lie in [1, {stats.d_h}], got {r}")
    if mode == "random":
        if rng is None:
            raise ValueError("random channel selection needs an rng")
        ranking = rng.permutation(stats.d_h).astype(np.int64)
        return ChannelSet(ranking[:r], mode=mode, layer=layer, head=head, ranking=ranking)
    if stats.n_samples < 1:
        raise EmptyStats("no calibration samples accumulated")
    return ChannelSet(argtopk(stats.importance, r), mode=mode, layer=layer, head=head, ranking=rank_channels(stats.importance))


def check_mode_compatible(model_cfg, mode: str) -> str:
    mode = normalize_mode(mode)
    if mode == "k_outlier" and model_cfg.is_gqa:
        raise GqaIncompatible(
            "k-outlier calibration is not supported for grouped-query attention "
            f"(n_heads_q={model_cfg.n_heads_q}, n_heads_kv={model_cfg.n_heads_kv}); use q or qk mode"
        )
    return mode


def collect_stats(model: ToyModel, dataset, mode: str) -> dict:
    """Run prefill over ``dataset`` and accumulate per-(layer, KV head) statistics.

    Query heads that share a KV head add into that head's statistics.
    """
    cfg = model.cfg
    mode = check_mode_compatible(cfg, mode)
    seqs = [np.atleast_1d(np.asarray(s, dtype=np.int64)) for s in dataset]
    if not seqs:
        raise EmptyDataset("calibration dataset is empty")
    stats = {(layer, g): CalibrationStats(cfg.d_h) for layer in range(cfg.n_layers) for g in range(cfg.n_heads_kv)}
    if mode == "random":
        return stats
    for tokens in seqs:
        res = prefill(model, tokens, return_queries=True)
        for layer in range(cfg.n_layers):
            Q = res.queries[layer]
            for hq in range(cfg.n_heads_q):
                g = cfg.kv_head(hq)
                accumulate_causal(stats[(layer, g)], Q[:, hq], res.cache.kv[layer][g].K, mode)
    return stats


def select_channel_map(stats: dict, r: int, mode: str, seed: int = 0) -> dict:
    mode = normalize_mode(mode)
    rng = make_rng(seed, 0xCA1) if mode == "random" else None
    return {
        key: select_channels(st, r, mode, rng=rng, layer=key[0], head=key[1]) for key, st in sorted(stats.items())
    }


def calibrate_model(model: ToyModel, dataset, cfg: SparsityConfig, mode: str, seed: int = 0) -> dict:
    """Channel map ``{(layer, kv_head): ChannelSet}`` from prefill passes over ``dataset``."""
    stats = collect_stats(model, dataset, mode)
    return select_channel_map(stats, cfg.r(model.cfg.d_h), mode, seed=seed)


def truncate_channel_map(channel_map: dict, r: int) -> dict:
    """Re-cut every set to its ``r`` most important channels (needs rankings)."""
    return {
        key: ChannelSet(cs.top(r), mode=cs.mode, layer=cs.layer, head=cs.head, ranking=cs.ranking)
        for key, cs in channel_map.items()
    }


def overlap_ratio(offline: ChannelSet, q, k_row, ratio: float) -> float:
    """Fraction of this step's top channels by ``|q_j k_j|`` that the offline set also ranks top.

    Both sets have ``ceil(ratio * d_h)`` channels; the offline one is cut from
    its importance ranking.
    """
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    q = np.asarray(q, dtype=np.float64)
    k_row = np.asarray(k_row, dtype=np.float64)
    n = max(1, math.ceil(ratio * q.shape[0] - 1e-9))
    online = argtopk(np.abs(q * k_row), n)
    offline_top = offline.top(n)
    return len(np.intersect1d(online, offline_top)) / n


# -- serialization -----------------------------------------------------------


def dataset_checksum(dataset) -> str:
    h = hashlib.sha256()
    for seq in dataset:
        arr = np.ascontiguousarray(np.asarray(seq, dtype="<i8"))
        h.update(len(arr).to_bytes(8, "little"))
        h.update(arr.tobytes())
    return h.hexdigest()


def save_channel_map(path, channel_map: dict, r: int | None = None, checksum: str = "", extra: dict | None = None) -> None:
    """DST1 file with ``layer{L}.head{H}.channels`` (and ``.ranking``) int32 tensors,
    plus a JSON sidecar at ``path + '.json'``."""
    tensors = {}
    modes = set()
    for (layer, head), cs in sorted(channel_map.items()):
        tensors[f"layer{layer}.head{head}.channels"] = cs.indices.astype(np.int32)
        if cs.ranking is not None:
            tensors[f"layer{layer}.head{head}.ranking"] = cs.ranking.astype(np.int32)
        modes.add(cs.mode)
    save_tensors(path, tensors)
    meta = {
        "mode": modes.pop() if len(modes) == 1 else sorted(modes),
        "r": r if r is not None else next(iter(channel_map.values())).r,
        "dataset_sha256": checksum,
    }
    meta.update(extra or {})
    with open(os.fspath(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_channel_map(path) -> dict:
    tensors = load_tensors(path)
    meta_path = os.fspath(path) + ".json"
    mode = "qk_outlier"
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            m = json.load(fh).get("mode", mode)
        mode = m if isinstance(m, str) else mode
    out = {}
    for name, arr in tensors.items():
        parts = name.split(".")
        if len(parts) != 3 or parts[2] != "channels":
            continue
        layer, head = int(parts[0][5:]), int(parts[1][4:])
        ranking = tensors.get(f"layer{layer}.head{head}.ranking")
        out[(layer, head)] = ChannelSet(arr, mode=mode, layer=layer, head=head, ranking=ranking)
    return out
