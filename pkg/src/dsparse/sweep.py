"""Sparsity-grid sweep: output error, selection recall and traffic per (alpha, beta)."""

from __future__ import annotations

import io
from dataclasses import dataclass, fields

import numpy as np

from .attention import SparsityConfig, argtopk, ds_decode, exact_scores, full_attention
from .calibration import collect_stats, select_channel_map, truncate_channel_map
from .label_cache import build_label_cache
from .model import ToyModel, prefill, synthetic_sequences
from .traffic import TrafficLedger, charge_full_attention

DEFAULT_LEVELS = (1.0, 1 / 2, 1 / 4, 1 / 8, 1 / 16, 1 / 32)
CSV_HEADER = "alpha,beta,seed_count,mean_l2_error,mean_recall,traffic_ratio"


def fmt(x: float) -> str:
    return format(float(x), ".6g")


@dataclass(frozen=True)
class SweepPoint:
    alpha: float
    beta: float
    seed_count: int
    mean_l2_error: float
    mean_recall: float
    traffic_ratio: float

    def csv_row(self) -> str:
        return ",".join(
            [fmt(self.alpha), fmt(self.beta), str(self.seed_count), fmt(self.mean_l2_error), fmt(self.mean_recall), fmt(self.traffic_ratio)]
        )


@dataclass
class SweepResult:
    points: list

    def get(self, alpha: float, beta: float) -> SweepPoint:
        for p in self.points:
            if p.alpha == alpha and p.beta == beta:
                return p
        raise KeyError((alpha, beta))

    def to_csv(self) -> str:
        return "\n".join([CSV_HEADER] + [p.csv_row() for p in self.points]) + "\n"

    def to_matrix(self, value: str = "mean_l2_error") -> str:
        """Gnuplot ``matrix nonuniform`` block: first row alphas, first column betas."""
        if value not in {f.name for f in fields(SweepPoint)}:
            raise ValueError(value)
        alphas = sorted({p.alpha for p in self.points}, reverse=True)
        betas = sorted({p.beta for p in self.points}, reverse=True)
        out = io.StringIO()
        out.write(" ".join([str(len(alphas))] + [fmt(a) for a in alphas]) + "\n")
        for b in betas:
            out.write(" ".join([fmt(b)] + [fmt(getattr(self.get(a, b), value)) for a in alphas]) + "\n")
        return out.getvalue()


def run_sparsity_sweep(
    model: ToyModel,
    alphas=DEFAULT_LEVELS,
    betas=DEFAULT_LEVELS,
    seeds=range(8),
    *,
    seq_len: int = 256,
    mode: str = "qk_outlier",
    channel_stats: dict | None = None,
    channel_map: dict | None = None,
    calib_seqs: int = 4,
    calib_seed: int = 1_000_003,
    quantized: bool = True,
    eval_tokens=None,
) -> SweepResult:
    """Compare Double Sparsity decode against full attention over a grid.

    For every seed a random sequence is prefilled; the last token's query at
    every (layer, query head) is decoded against the full KV cache. Errors are
    L2 norms of the attention output difference, recall is measured against
    top-k of the exact scores, and traffic is DS bytes over full-attention
    bytes. With all channels kept (r = d_h) the label cache is the key cache
    itself and is not quantized.

    Channels come from ``channel_map`` (re-cut per alpha from its rankings),
    else from ``channel_stats``, else from calibrating on fresh sequences.
    """
    alphas, betas = [float(a) for a in alphas], [float(b) for b in betas]
    for v in alphas + betas:
        if not 0 < v <= 1:
            raise ValueError(f"sparsity levels must lie in (0, 1], got {v}")
    if len(set(alphas)) != len(alphas) or len(set(betas)) != len(betas):
        raise ValueError("sparsity levels must be unique")
    mc = model.cfg
    seeds = list(seeds)
    r_of = {a: SparsityConfig(a, 1.0).r(mc.d_h) for a in alphas}
    if channel_map is not None:
        maps = {a: truncate_channel_map(channel_map, r_of[a]) for a in alphas}
    else:
        if mode == "random":
            channel_stats = collect_stats(model, [[0]], "random")
        elif channel_stats is None:
            channel_stats = collect_stats(model, synthetic_sequences(mc, calib_seqs, seq_len, calib_seed), mode)
        maps = {a: select_channel_map(channel_stats, r_of[a], mode, seed=calib_seed) for a in alphas}

    err = {(a, b): 0.0 for a in alphas for b in betas}
    rec = dict.fromkeys(err, 0.0)
    ds_ledgers = {key: TrafficLedger() for key in err}
    full_ledger = TrafficLedger()
    n = 0
    for s in seeds:
        tokens = eval_tokens[s] if eval_tokens is not None else synthetic_sequences(mc, 1, seq_len, s)[0]
        res = prefill(model, tokens, return_queries=True)
        for layer in range(mc.n_layers):
            for hq in range(mc.n_heads_q):
                g = mc.kv_head(hq)
                kvh = res.cache.kv[layer][g]
                K, V = kvh.K, kvh.V
                q = res.queries[layer][-1, hq]
                y_full = full_attention(q, K, V)
                charge_full_attention(full_ledger, K.shape[0], mc.d_h)
                exact = exact_scores(q, K)
                n += 1
                for a in alphas:
                    cs = maps[a][(layer, g)]
                    label = build_label_cache(K, cs, quantized=quantized and cs.r < mc.d_h)
                    for b in betas:
                        cfg = SparsityConfig(a, b)
                        y, sel = ds_decode(q, K, V, cs, label, cfg, ds_ledgers[(a, b)])
                        k = sel.indices.size
                        err[(a, b)] += float(np.linalg.norm(y.astype(np.float64) - y_full))
                        rec[(a, b)] += np.intersect1d(sel.indices, argtopk(exact, k)).size / k
    full_total = full_ledger.total
    points = [
        SweepPoint(a, b, len(seeds), err[(a, b)] / n, rec[(a, b)] / n, ds_ledgers[(a, b)].total / full_total)
        for a in alphas
        for b in betas
    ]
    return SweepResult(points)
