"""Minimal decoder-only transformer used to generate realistic Q/K/V streams.

Pre-norm residual blocks (RMSNorm), rotary position embedding on q and k,
grouped-query attention (``n_heads_kv`` divides ``n_heads_q``) and a SiLU MLP.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import SparsityConfig, causal_attention, ds_decode, full_attention
from .channels import ChannelSet
from .exceptions import LayerOutOfRange, ShapeMismatch, VocabOutOfRange
from .label_cache import KvCacheHead, LabelCacheHead, append_token, build_label_cache
from .tensor import load_tensors, make_rng, randn, save_tensors
from .traffic import TrafficLedger, charge_full_attention

DEFAULT_PLANT_FACTOR = 10.0


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 256
    n_heads_q: int = 8
    n_heads_kv: int = 8
    d_ff: int = 512
    vocab_size: int = 512
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads_q", "n_heads_kv", "d_ff", "vocab_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.d_model % self.n_heads_q:
            raise ValueError("d_model must be divisible by n_heads_q")
        if self.n_heads_q % self.n_heads_kv:
            raise ValueError("n_heads_q must be divisible by n_heads_kv")
        if self.d_h % 2:
            raise ValueError("head dimension must be even for rotary embedding")

    @property
    def d_h(self) -> int:
        return self.d_model // self.n_heads_q

    @property
    def group_size(self) -> int:
        return self.n_heads_q // self.n_heads_kv

    @property
    def is_gqa(self) -> bool:
        return self.n_heads_q != self.n_heads_kv

    def kv_head(self, q_head: int) -> int:
        return q_head // self.group_size


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    attn_norm: np.ndarray
    mlp_norm: np.ndarray
    # per-channel gains applied after rotary; ones unless outliers were planted
    q_gain: np.ndarray
    k_gain: np.ndarray


@dataclass
class ModelWeights:
    embed: np.ndarray
    layers: list
    final_norm: np.ndarray
    unembed: np.ndarray

    def to_tensors(self) -> dict:
        out = {"embed": self.embed, "final_norm": self.final_norm, "unembed": self.unembed}
        for i, lw in enumerate(self.layers):
            for name, arr in asdict(lw).items():
                out[f"layer{i}.{name}"] = arr
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, n_layers: int) -> "ModelWeights":
        f32 = lambda a: np.asarray(a, dtype=np.float32)  # noqa: E731
        names = LayerWeights.__dataclass_fields__
        layers = [LayerWeights(**{n: f32(tensors[f"layer{i}.{n}"]) for n in names}) for i in range(n_layers)]
        return cls(f32(tensors["embed"]), layers, f32(tensors["final_norm"]), f32(tensors["unembed"]))


def parse_plant(spec: str | None) -> dict:
    """Parse ``"idx:factor,idx:factor"`` (factor optional, default 10)."""
    if not spec:
        return {}
    out = {}
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        idx, _, factor = item.partition(":")
        out[int(idx)] = float(factor) if factor else DEFAULT_PLANT_FACTOR
    return out


def init_weights(
    cfg: ModelConfig,
    rng: np.random.Generator,
    plant: dict | None = None,
    channel_spread: float | None = None,
) -> ModelWeights:
    """Scaled-normal initialization.

    ``channel_spread`` is the log-normal sigma of per-channel magnitudes in the
    q/k projections, so unplanted heads still carry uneven channel importance.
    It defaults to 0.5, or to 0 when outliers are planted so that the planted
    separation is exactly the plant factor.

    ``plant`` maps head channel index -> gain; the gain multiplies that channel
    of the rotated query and key of every head in every layer, so planted
    channels stay put regardless of token position.
    """
    d, dh, hq, hkv = cfg.d_model, cfg.d_h, cfg.n_heads_q, cfg.n_heads_kv
    plant = dict(plant or {})
    if channel_spread is None:
        channel_spread = 0.0 if plant else 0.5
    for c in plant:
        if not 0 <= c < dh:
            raise ValueError(f"planted channel {c} out of range for d_h={dh}")
    res_scale = 1.0 / math.sqrt(2 * cfg.n_layers)

    def proj(n_in, n_out, scale=1.0):
        return randn(rng, (n_in, n_out)) * np.float32(scale / math.sqrt(n_in))

    embed = randn(rng, (cfg.vocab_size, d))
    layers = []
    for _ in range(cfg.n_layers):
        wq = proj(d, hq * dh)
        wk = proj(d, hkv * dh)
        if channel_spread > 0:
            wq *= np.exp(np.float32(channel_spread) * randn(rng, (hq * dh,)))
            wk *= np.exp(np.float32(channel_spread) * randn(rng, (hkv * dh,)))
        wv = proj(d, hkv * dh)
        wo = proj(hq * dh, d, res_scale)
        w_up = proj(d, cfg.d_ff)
        w_down = proj(cfg.d_ff, d, res_scale)
        q_gain = np.ones((hq, dh), dtype=np.float32)
        k_gain = np.ones((hkv, dh), dtype=np.float32)
        for c, factor in plant.items():
            q_gain[:, c] = factor
            k_gain[:, c] = factor
        layers.append(
            LayerWeights(
                wq=wq,
                wk=wk,
                wv=wv,
                wo=wo,
                w_up=w_up,
                w_down=w_down,
                attn_norm=np.ones(d, dtype=np.float32),
                mlp_norm=np.ones(d, dtype=np.float32),
                q_gain=q_gain,
                k_gain=k_gain,
            )
        )
    return ModelWeights(embed, layers, np.ones(d, dtype=np.float32), proj(d, cfg.vocab_size))


def rms_norm(x, gain, eps):
    x = np.asarray(x, dtype=np.float32)
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + np.float32(eps))
    return (x * inv.astype(np.float32) * gain).astype(np.float32)


def rotary(x, positions, base):
    """NeoX-style rotary embedding; x is ``[T, H, d_h]``, positions ``[T]``."""
    dh = x.shape[-1]
    half = dh // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / dh)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(ang).astype(np.float32)[:, None, :]
    sin = np.sin(ang).astype(np.float32)[:, None, :]
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1).astype(np.float32)


def silu(x):
    return (x / (1.0 + np.exp(-x))).astype(np.float32)


class ToyModel:
    def __init__(self, cfg: ModelConfig, weights: ModelWeights):
        self.cfg = cfg
        self.weights = weights

    @classmethod
    def random(cls, cfg: ModelConfig | None = None, seed: int = 0, plant: dict | None = None, **kw) -> "ToyModel":
        cfg = cfg or ModelConfig()
        return cls(cfg, init_weights(cfg, make_rng(seed), plant=plant, **kw))

    def layer_qkv(self, layer: int, h, positions):
        """Rotated query, key and value of ``layer`` for input hidden rows ``h``.

        Returns ``q [T, Hq, d_h]``, ``k [T, Hkv, d_h]``, ``v [T, Hkv, d_h]``.
        """
        if not 0 <= layer < self.cfg.n_layers:
            raise LayerOutOfRange(f"layer {layer} not in [0, {self.cfg.n_layers})")
        cfg, lw = self.cfg, self.weights.layers[layer]
        h = np.atleast_2d(np.asarray(h, dtype=np.float32))
        T = h.shape[0]
        x = rms_norm(h, lw.attn_norm, cfg.norm_eps)
        q = (x @ lw.wq).reshape(T, cfg.n_heads_q, cfg.d_h)
        k = (x @ lw.wk).reshape(T, cfg.n_heads_kv, cfg.d_h)
        v = (x @ lw.wv).reshape(T, cfg.n_heads_kv, cfg.d_h)
        positions = np.atleast_1d(positions)
        q = rotary(q, positions, cfg.rope_base) * lw.q_gain
        k = rotary(k, positions, cfg.rope_base) * lw.k_gain
        return q.astype(np.float32), k.astype(np.float32), v.astype(np.float32)

    def attn_output(self, layer: int, heads_out):
        """Project concatenated head outputs ``[T, Hq, d_h]`` back to d_model."""
        T = heads_out.shape[0]
        return (heads_out.reshape(T, -1) @ self.weights.layers[layer].wo).astype(np.float32)

    def mlp(self, layer: int, h):
        lw = self.weights.layers[layer]
        x = rms_norm(h, lw.mlp_norm, self.cfg.norm_eps)
        return (silu(x @ lw.w_up) @ lw.w_down).astype(np.float32)

    def logits(self, h):
        x = rms_norm(h, self.weights.final_norm, self.cfg.norm_eps)
        return (x @ self.weights.unembed).astype(np.float32)

    def embed(self, tokens):
        tokens = np.atleast_1d(np.asarray(tokens, dtype=np.int64))
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise VocabOutOfRange(f"token ids must lie in [0, {self.cfg.vocab_size})")
        return self.weights.embed[tokens].astype(np.float32)


@dataclass
class ModelCache:
    """Per-(layer, KV head) KV caches plus optional label caches."""

    kv: list
    labels: list | None = None
    channel_map: dict | None = None

    @property
    def S(self) -> int:
        return self.kv[0][0].S

    def attach_labels(self, channel_map: dict, quantized: bool = True) -> None:
        """Build label caches for every (layer, KV head) from the cached keys."""
        self.channel_map = channel_map
        self.labels = [
            [
                build_label_cache(kv.K, channel_map[(layer, g)], quantized=quantized, capacity=kv.capacity)
                for g, kv in enumerate(row)
            ]
            for layer, row in enumerate(self.kv)
        ]


@dataclass
class PrefillResult:
    cache: ModelCache
    hiddens: list
    logits: np.ndarray
    queries: list = field(default_factory=list)


def prefill(model: ToyModel, tokens, capacity: int | None = None, return_queries: bool = False) -> PrefillResult:
    """Causal forward pass with full attention over ``tokens``.

    ``hiddens[l]`` is the input hidden state of layer ``l`` (``[T, d_model]``).
    ``queries[l]`` (when requested) is ``[T, Hq, d_h]``.
    """
    cfg = model.cfg
    tokens = np.atleast_1d(np.asarray(tokens, dtype=np.int64))
    T = tokens.size
    if T < 1:
        raise ShapeMismatch("prefill needs at least one token")
    capacity = max(capacity or 0, T + 256)
    h = model.embed(tokens)
    positions = np.arange(T)
    kv, hiddens, queries = [], [], []
    for layer in range(cfg.n_layers):
        hiddens.append(h)
        q, k, v = model.layer_qkv(layer, h, positions)
        if return_queries:
            queries.append(q)
        heads = np.empty_like(q)
        for hq in range(cfg.n_heads_q):
            g = cfg.kv_head(hq)
            heads[:, hq] = causal_attention(q[:, hq], k[:, g], v[:, g])
        kv.append([KvCacheHead.from_arrays(k[:, g], v[:, g], capacity=capacity) for g in range(cfg.n_heads_kv)])
        h = h + model.attn_output(layer, heads)
        h = h + model.mlp(layer, h)
    return PrefillResult(ModelCache(kv), hiddens, model.logits(h), queries)


def decode_step(
    model: ToyModel,
    cache: ModelCache,
    token: int,
    attn_mode: str = "full",
    channel_map: dict | None = None,
    cfg: SparsityConfig | None = None,
    ledger: TrafficLedger | None = None,
    trace: list | None = None,
) -> np.ndarray:
    """One autoregressive step; appends the token to every cache and returns logits.

    ``attn_mode`` is ``"full"`` or ``"double_sparsity"``. In the latter, label
    caches are built on first use from ``channel_map`` (keyed by
    ``(layer, kv_head)``). When ``trace`` is a list, one dict per layer is
    appended with the input hidden state and the per-head selections.
    """
    if attn_mode not in ("full", "double_sparsity"):
        raise ValueError(f"unknown attn_mode {attn_mode!r}")
    mc = model.cfg
    if cache.S < 1:
        raise ShapeMismatch("decode needs a prefilled cache")
    sparse = attn_mode == "double_sparsity"
    if sparse:
        cfg = cfg or SparsityConfig()
        if cache.labels is None:
            if channel_map is None:
                raise ValueError("double_sparsity decode needs a channel map")
            cache.attach_labels(channel_map)
    pos = cache.S
    h = model.embed([token])
    for layer in range(mc.n_layers):
        q, k, v = model.layer_qkv(layer, h, [pos])
        for g in range(mc.n_heads_kv):
            if cache.labels is not None:
                append_token(cache.labels[layer][g], cache.kv[layer][g], k[0, g], v[0, g])
            else:
                cache.kv[layer][g].append(k[0, g], v[0, g])
        heads = np.empty_like(q)
        selections = []
        for hq in range(mc.n_heads_q):
            g = mc.kv_head(hq)
            kvh = cache.kv[layer][g]
            if sparse:
                label = cache.labels[layer][g]
                heads[0, hq], sel = ds_decode(q[0, hq], kvh.K, kvh.V, label.channels, label, cfg, ledger)
                selections.append(sel.indices)
            else:
                heads[0, hq] = full_attention(q[0, hq], kvh.K, kvh.V)
                if ledger is not None:
                    charge_full_attention(ledger, kvh.S, mc.d_h)
        if trace is not None:
            trace.append({"layer": layer, "hidden": h[0].copy(), "query": q[0].copy(), "selections": selections})
        h = h + model.attn_output(layer, heads)
        h = h + model.mlp(layer, h)
    return model.logits(h)[0]


def layer_cosine_similarity(hiddens, return_zero_count: bool = False):
    """Mean over tokens of cos(h_l[t], h_{l+1}[t]) for each consecutive layer pair.

    Rows with zero norm contribute similarity 0 and are counted.
    """
    if len(hiddens) < 2:
        raise ValueError("need hidden states from at least two layers")
    out, zeros = [], 0
    for a, b in zip(hiddens[:-1], hiddens[1:]):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        if a.shape != b.shape:
            raise ShapeMismatch(f"hidden shapes differ: {a.shape} vs {b.shape}")
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        ok = (na > 0) & (nb > 0)
        zeros += int(np.sum(~ok))
        cos = np.zeros(a.shape[0])
        cos[ok] = np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])
        out.append(float(np.clip(cos.mean(), -1.0, 1.0)))
    return (out, zeros) if return_zero_count else out


# -- serialization -----------------------------------------------------------


def _sidecar(path) -> str:
    return os.fspath(path) + ".json"


def save_model(path, model: ToyModel) -> None:
    """Weights to DST1 at ``path``, config to ``path + '.json'``."""
    save_tensors(path, model.weights.to_tensors())
    with open(_sidecar(path), "w") as fh:
        json.dump(asdict(model.cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> ToyModel:
    with open(_sidecar(path)) as fh:
        cfg = ModelConfig(**json.load(fh))
    return ToyModel(cfg, ModelWeights.from_tensors(load_tensors(path), cfg.n_layers))


def load_hidden_states(path) -> list:
    """Per-layer hidden states from a DST1 dump with tensors ``layer{L}.hidden``."""
    tensors = load_tensors(path)
    layers = sorted(int(n[5:].split(".")[0]) for n in tensors if n.startswith("layer") and n.endswith(".hidden"))
    return [np.asarray(tensors[f"layer{i}.hidden"], dtype=np.float32) for i in layers]


def synthetic_sequences(cfg: ModelConfig, n: int, length: int, seed: int) -> list:
    """``n`` uniform random token sequences of ``length`` ids, reproducible per seed."""
    rng = make_rng(seed, 0x70C)
    return [rng.integers(0, cfg.vocab_size, size=length).astype(np.int64) for _ in range(n)]


def channel_map_from_sets(sets) -> dict:
    return {(cs.layer, cs.head): cs for cs in sets}


def full_channel_map(cfg: ModelConfig) -> dict:
    return {
        (layer, g): ChannelSet(np.arange(cfg.d_h), mode="random", layer=layer, head=g, ranking=np.arange(cfg.d_h))
        for layer in range(cfg.n_layers)
        for g in range(cfg.n_heads_kv)
    }
