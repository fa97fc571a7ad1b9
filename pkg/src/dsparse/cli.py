"""Command-line entry point: ``dsparse <subcommand> [flags]``.

Every subcommand is deterministic for a fixed seed. Reports are CSV or JSON,
written to ``--out`` or stdout. Exit codes: 0 ok, 1 IO error, 2 usage error,
3 incompatible configuration, 4 internal invariant violated.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction

import numpy as np

from .attention import SparsityConfig
from .calibration import (
    calibrate_model,
    check_mode_compatible,
    dataset_checksum,
    load_channel_map,
    overlap_ratio,
    save_channel_map,
    truncate_channel_map,
)
from .channels import MODE_ALIASES, normalize_mode
from .exceptions import DsparseError, DstFormatError, GqaIncompatible
from .model import ModelConfig, ToyModel, decode_step, layer_cosine_similarity, load_model, parse_plant, prefill, synthetic_sequences
from .offload import OffloadState, offload_decode_step
from .sweep import DEFAULT_LEVELS, fmt, run_sparsity_sweep
from .traffic import TrafficLedger, label_ablation_report

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_INCOMPATIBLE, EXIT_INVARIANT = 0, 1, 2, 3, 4
COMMANDS = ("calibrate", "decode", "sweep", "overlap", "similarity", "offload", "ablation")
CALIB_SEED_OFFSET = 1_000_003
DEFAULT_SINGLE_LEVEL = 1 / 16


class InvariantViolation(DsparseError):
    pass


@dataclass
class RunConfig:
    command: str = "sweep"
    model: str | None = None
    seed: int = 0
    layers: int = 4
    d_model: int = 256
    heads_q: int = 8
    heads_kv: int = 8
    plant: str | None = None
    alphas: list | None = None
    betas: list | None = None
    mode: str = "qk"
    channel_map: str | None = None
    out: str | None = None
    matrix: str | None = None
    seeds: int = 8
    seq_len: int = 256
    calib_seqs: int = 4
    prompt_len: int = 64
    steps: int = 8
    attn: str = "ds"
    sequential: bool = False
    force_exact_query: bool = False
    query_source: str = "input"
    head_dim: int = 64
    ablation_r: int = 8

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    # single-level commands take the first listed level, else this default
    @property
    def alpha(self) -> float:
        return float(self.alphas[0]) if self.alphas else DEFAULT_SINGLE_LEVEL

    @property
    def beta(self) -> float:
        return float(self.betas[0]) if self.betas else DEFAULT_SINGLE_LEVEL

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_layers=self.layers, d_model=self.d_model, n_heads_q=self.heads_q, n_heads_kv=self.heads_kv)


def parse_level(text: str) -> float:
    """``"0.0625"`` or ``"1/16"``; must lie in (0, 1]."""
    try:
        v = float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number or fraction: {text!r}")
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"sparsity level must lie in (0, 1], got {text}")
    return v


def parse_levels(text: str) -> list:
    levels = [parse_level(t) for t in text.split(",") if t.strip()]
    if not levels:
        raise argparse.ArgumentTypeError("empty level list")
    if len(set(levels)) != len(levels):
        raise argparse.ArgumentTypeError(f"duplicate levels in {text!r}")
    return levels


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("model and run")
    g.add_argument("--config", help="read run settings from this JSON file; explicit flags override it")
    g.add_argument("--dump-config", metavar="PATH", help="write the resolved run settings as JSON and exit")
    g.add_argument("--model", help="DST1 weight file (config in PATH.json); default: generate from --seed")
    g.add_argument("--seed", type=int, help="seed for weights and data (env DS_SEED overrides)")
    g.add_argument("--layers", type=_positive, help="transformer layers of a generated model")
    g.add_argument("--d-model", type=_positive, help="hidden size of a generated model")
    g.add_argument("--heads-q", type=_positive, help="query heads of a generated model")
    g.add_argument("--heads-kv", type=_positive, help="key/value heads (fewer than --heads-q means grouped-query)")
    g.add_argument("--plant", help='amplify channels in every q/k head, "idx:factor,..." (factor defaults to 10)')
    g.add_argument("--out", help="output file (default: stdout)")
    s = common.add_argument_group("sparsity")
    s.add_argument("--alpha", "--alphas", dest="alphas", type=parse_levels, help="channel fraction(s), comma list, fractions allowed")
    s.add_argument("--beta", "--betas", dest="betas", type=parse_levels, help="token fraction(s), comma list, fractions allowed")
    s.add_argument("--mode", choices=sorted(MODE_ALIASES), help="channel importance statistic for calibration")
    s.add_argument("--channel-map", help="DST1 channel map from 'calibrate'; default: calibrate in-process")
    s.add_argument("--calib-seqs", type=_positive, help="calibration sequences when calibrating in-process")
    s.add_argument("--seq-len", type=_positive, help="tokens per calibration / evaluation sequence")
    d = common.add_argument_group("decoding")
    d.add_argument("--prompt-len", type=_positive, help="prefill length before decoding")
    d.add_argument("--steps", type=_positive, help="decode steps")
    d.add_argument("--seeds", type=_positive, help="number of evaluation seeds (sweep) or sequences (similarity)")
    d.add_argument("--attn", choices=("full", "ds"), help="decode attention: full or double sparsity")
    d.add_argument("--sequential", action="store_true", default=None, help="offload: also run the sequential schedule and require identical logits")
    d.add_argument("--force-exact-query", action="store_true", default=None, help="offload: plan each layer from its true query")
    d.add_argument("--query-source", choices=("input", "output"), help="offload: predict the next query from this layer's input or output")
    d.add_argument("--matrix", help="sweep: also write a gnuplot 'matrix nonuniform' file of mean error")
    d.add_argument("--head-dim", type=_positive, help="ablation: head dimension")
    d.add_argument("--ablation-r", type=_positive, help="ablation: number of label channels")

    parser = argparse.ArgumentParser(prog="dsparse", description="Double Sparsity decode engine: calibration, analysis and simulation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "calibrate": "select outlier channels per layer and KV head; writes a DST1 channel map plus PATH.json summary",
        "decode": "prefill a prompt and greedily decode; JSON with tokens, traffic and logits checksum",
        "sweep": "error / recall / traffic over an alpha x beta grid; CSV",
        "overlap": "offline vs online channel agreement per channel ratio; CSV",
        "similarity": "mean cosine of consecutive layers' input hidden states; CSV",
        "offload": "simulate host-offloaded KV with double-buffered prefetch; JSON",
        "ablation": "approximate-scoring bytes with and without a label cache; JSON",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return parser


def resolve_config(argv=None, environ=None) -> tuple:
    """Parse ``argv`` into a :class:`RunConfig`; returns ``(config, dump_path)``."""
    environ = os.environ if environ is None else environ
    ns = build_parser().parse_args(argv)
    cfg = RunConfig()
    if ns.config:
        with open(ns.config) as fh:
            cfg = RunConfig.from_json(fh.read())
    cfg.command = ns.command
    for f in fields(RunConfig):
        v = getattr(ns, f.name, None)
        if f.name != "command" and v is not None:
            setattr(cfg, f.name, v)
    if environ.get("DS_SEED", "").strip():
        try:
            cfg.seed = int(environ["DS_SEED"])
        except ValueError:
            raise argparse.ArgumentTypeError(f"DS_SEED must be an integer, got {environ['DS_SEED']!r}")
    normalize_mode(cfg.mode)
    return cfg, ns.dump_config


# -- helpers -----------------------------------------------------------------


def _model(cfg: RunConfig) -> ToyModel:
    if cfg.model:
        return load_model(cfg.model)
    return ToyModel.random(cfg.model_config(), seed=cfg.seed, plant=parse_plant(cfg.plant) or None)


def _calib_data(model: ToyModel, cfg: RunConfig) -> list:
    return synthetic_sequences(model.cfg, cfg.calib_seqs, cfg.seq_len, cfg.seed + CALIB_SEED_OFFSET)


def _channel_map(model: ToyModel, cfg: RunConfig, alpha: float | None = None) -> dict:
    if cfg.channel_map:
        cmap = load_channel_map(cfg.channel_map)
        mc = model.cfg
        want = {(layer, g) for layer in range(mc.n_layers) for g in range(mc.n_heads_kv)}
        if set(cmap) != want:
            raise ValueError("channel map does not match the model's layers and KV heads")
        for cs in cmap.values():
            cs.check(mc.d_h)
        if cfg.alphas and all(cs.ranking is not None for cs in cmap.values()):
            cmap = truncate_channel_map(cmap, SparsityConfig(cfg.alpha, 1.0).r(mc.d_h))
        return cmap
    alpha = cfg.alpha if alpha is None else alpha
    return calibrate_model(model, _calib_data(model, cfg), SparsityConfig(alpha, 1.0), cfg.mode, seed=cfg.seed)


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _round(x):
    return float(fmt(x))


def _digest_update(digest, logits) -> None:
    # hash 6-significant-digit text, not raw bits, so BLAS last-bit noise across machines is ignored
    digest.update(",".join(fmt(x) for x in np.asarray(logits).ravel()).encode() + b"\n")


def _prompt(model: ToyModel, cfg: RunConfig) -> np.ndarray:
    return synthetic_sequences(model.cfg, 1, cfg.prompt_len, cfg.seed)[0]


# -- subcommands ---------------------------------------------------------------


def cmd_calibrate(cfg: RunConfig) -> int:
    if not cfg.out:
        raise ValueError("calibrate needs --out for the channel map")
    model = _model(cfg)
    check_mode_compatible(model.cfg, cfg.mode)
    data = _calib_data(model, cfg)
    cmap = calibrate_model(model, data, SparsityConfig(cfg.alpha, 1.0), cfg.mode, seed=cfg.seed)
    r = SparsityConfig(cfg.alpha, 1.0).r(model.cfg.d_h)
    top = {f"layer{layer}.head{g}": [int(c) for c in cs.top(min(10, model.cfg.d_h))] for (layer, g), cs in sorted(cmap.items())}
    save_channel_map(cfg.out, cmap, r=r, checksum=dataset_checksum(data), extra={"alpha": cfg.alpha, "top10": top})
    return EXIT_OK


def cmd_decode(cfg: RunConfig) -> int:
    model = _model(cfg)
    sparse = cfg.attn == "ds"
    sc = SparsityConfig(cfg.alpha, cfg.beta)
    res = prefill(model, _prompt(model, cfg))
    if sparse:
        res.cache.attach_labels(_channel_map(model, cfg))
    ledger = TrafficLedger()
    logits = res.logits[-1]
    tokens, digest = [], hashlib.sha256()
    for _ in range(cfg.steps):
        tok = int(np.argmax(logits))
        tokens.append(tok)
        logits = decode_step(model, res.cache, tok, "double_sparsity" if sparse else "full", cfg=sc, ledger=ledger)
        _digest_update(digest, logits)
    report = {"attn": cfg.attn, "tokens": tokens, "traffic": ledger.to_dict(), "logits_sha256": digest.hexdigest()}
    _emit(_json(report), cfg.out)
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    model = _model(cfg)
    mode = check_mode_compatible(model.cfg, cfg.mode)
    cmap = load_channel_map(cfg.channel_map) if cfg.channel_map else None
    if cmap is not None and any(cs.ranking is None for cs in cmap.values()):
        raise ValueError("sweep needs a channel map with rankings (written by 'calibrate')")
    result = run_sparsity_sweep(
        model,
        cfg.alphas or DEFAULT_LEVELS,
        cfg.betas or DEFAULT_LEVELS,
        seeds=range(cfg.seed, cfg.seed + cfg.seeds),
        seq_len=cfg.seq_len,
        mode=mode,
        channel_map=cmap,
        calib_seqs=cfg.calib_seqs,
        calib_seed=cfg.seed + CALIB_SEED_OFFSET,
    )
    _emit(result.to_csv(), cfg.out)
    if cfg.matrix:
        _emit(result.to_matrix(), cfg.matrix)
    return EXIT_OK


OVERLAP_RATIOS = tuple(i / 16 for i in range(1, 17))


def cmd_overlap(cfg: RunConfig) -> int:
    """Agreement between calibrated channels and each decode step's own top channels.

    The online statistic at a step is ``|q_j| * mean_s |K[s, j]|`` over the
    tokens cached so far, the per-step analogue of the qk calibration score.
    """
    model = _model(cfg)
    mc = model.cfg
    cmap = _channel_map(model, cfg)
    if any(cs.ranking is None for cs in cmap.values()):
        raise ValueError("overlap needs a channel map with rankings (written by 'calibrate')")
    res = prefill(model, _prompt(model, cfg))
    sums = {ratio: 0.0 for ratio in OVERLAP_RATIOS}
    n = 0
    logits = res.logits[-1]
    for _ in range(cfg.steps):
        trace = []
        logits = decode_step(model, res.cache, int(np.argmax(logits)), "full", trace=trace)
        for layer, rec in enumerate(trace):
            for hq in range(mc.n_heads_q):
                g = mc.kv_head(hq)
                k_row = np.abs(res.cache.kv[layer][g].K.astype(np.float64)).mean(axis=0)
                for ratio in OVERLAP_RATIOS:
                    sums[ratio] += overlap_ratio(cmap[(layer, g)], rec["query"][hq], k_row, ratio)
                n += 1
    lines = ["ratio,mean_overlap"] + [f"{fmt(ratio)},{fmt(sums[ratio] / n)}" for ratio in OVERLAP_RATIOS]
    _emit("\n".join(lines) + "\n", cfg.out)
    return EXIT_OK


def cmd_similarity(cfg: RunConfig) -> int:
    model = _model(cfg)
    seqs = synthetic_sequences(model.cfg, cfg.seeds, cfg.seq_len, cfg.seed)
    totals = None
    for tokens in seqs:
        sims = layer_cosine_similarity(prefill(model, tokens).hiddens)
        totals = sims if totals is None else [a + b for a, b in zip(totals, sims)]
    lines = ["layer_a,layer_b,mean_cosine"] + [f"{i},{i + 1},{fmt(t / len(seqs))}" for i, t in enumerate(totals)]
    _emit("\n".join(lines) + "\n", cfg.out)
    return EXIT_OK


def run_offload(model: ToyModel, cmap: dict, cfg: RunConfig, sequential: bool) -> dict:
    sc = SparsityConfig(cfg.alpha, cfg.beta)
    res = prefill(model, _prompt(model, cfg), capacity=cfg.prompt_len + cfg.steps)
    state = OffloadState.from_cache(model, res.cache.kv, cmap)
    source = "output" if cfg.force_exact_query else cfg.query_source
    ledger = TrafficLedger()
    logits = res.logits[-1]
    tokens, digest = [], hashlib.sha256()
    for _ in range(cfg.steps):
        tok = int(np.argmax(logits))
        tokens.append(tok)
        logits = offload_decode_step(state, tok, sc, ledger, sequential=sequential, query_source=source)
        _digest_update(digest, logits)
    st = state.stats
    bound = max(b for _, b in st.device_per_step)
    within = all(hw <= b for hw, b in st.device_per_step)
    return {
        "alpha": cfg.alpha,
        "beta": cfg.beta,
        "steps": cfg.steps,
        "query_source": source,
        "schedule": "sequential" if sequential else "concurrent",
        "tokens": tokens,
        "jaccard_per_layer": [_round(j) for j in st.mean_jaccard()],
        "device_high_water_bytes": st.device_high_water,
        "device_bound_bytes": bound,
        "device_within_bound": within,
        "label_cache_bytes": state.label_nbytes(),
        "host_kv_bytes": state.store.nbytes(),
        "traffic": ledger.to_dict(),
        "logits_sha256": digest.hexdigest(),
    }


def cmd_offload(cfg: RunConfig) -> int:
    model = _model(cfg)
    cmap = _channel_map(model, cfg)
    report = run_offload(model, cmap, cfg, sequential=False)
    if cfg.sequential:
        seq = run_offload(model, cmap, cfg, sequential=True)
        same = {k: v for k, v in seq.items() if k != "schedule"} == {k: v for k, v in report.items() if k != "schedule"}
        report["sequential_logits_sha256"] = seq["logits_sha256"]
        report["schedules_identical"] = same
    _emit(_json(report), cfg.out)
    if cfg.sequential and not report["schedules_identical"]:
        raise InvariantViolation("concurrent and sequential offload schedules diverged")
    if not report["device_within_bound"]:
        raise InvariantViolation("device KV high-water mark exceeded the two-slot bound")
    return EXIT_OK


def cmd_ablation(cfg: RunConfig) -> int:
    report = label_ablation_report(cfg.seq_len, cfg.head_dim, cfg.ablation_r)
    _emit(_json({k: (_round(v) if isinstance(v, float) else v) for k, v in report.to_dict().items()}), cfg.out)
    return EXIT_OK


HANDLERS = {
    "calibrate": cmd_calibrate,
    "decode": cmd_decode,
    "sweep": cmd_sweep,
    "overlap": cmd_overlap,
    "similarity": cmd_similarity,
    "offload": cmd_offload,
    "ablation": cmd_ablation,
}


def main(argv=None) -> int:
    try:
        cfg, dump = resolve_config(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (argparse.ArgumentTypeError, ValueError, KeyError, TypeError) as exc:
        print(f"dsparse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"dsparse: error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        if dump:
            with open(dump, "w") as fh:
                fh.write(cfg.to_json())
            return EXIT_OK
        return HANDLERS[cfg.command](cfg)
    except GqaIncompatible as exc:
        print(f"dsparse: incompatible configuration: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except InvariantViolation as exc:
        print(f"dsparse: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (OSError, DstFormatError) as exc:
        print(f"dsparse: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, DsparseError) as exc:
        print(f"dsparse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
