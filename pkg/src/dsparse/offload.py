"""Offload simulation: host-resident KV, device-resident label caches, and a
two-slot prefetch buffer fed by approximate next-layer queries.

Per decode step, with ``S`` tokens already on the host:

* layer 0's plan uses the true layer-0 query (its input is the embedding);
* while layer ``l`` computes, the prefetch agent projects layer ``l``'s input
  hidden state through layer ``l+1``'s q/k projections, scores layer ``l+1``'s
  label cache, and gathers the selected host rows into the other slot;
* the current token's own K/V row is produced on device when its layer runs,
  so it is scored from the predicted key and never transferred.

``sequential=True`` runs the prefetch jobs inline at the same points of the
schedule, which gives bit-identical results; it exists for differential tests.
"""

from __future__ import annotations

import enum
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .attention import SparsityConfig, TopkResult, approx_scores, argtopk, attend, exact_scores
from .exceptions import BufferNotReady, LayerOutOfRange, ShapeMismatch, SlotBusy
from .label_cache import KvCacheHead, LabelCacheHead, append_token, build_label_cache, dequantize, quantize_rows_4bit
from .model import ModelConfig, ToyModel
from .traffic import TrafficLedger

WAIT_TIMEOUT = 60.0


class SlotStatus(enum.Enum):
    EMPTY = "empty"
    PREFETCHING = "prefetching"
    READY = "ready"
    CONSUMED = "consumed"


@dataclass
class BufferSlot:
    status: SlotStatus = SlotStatus.EMPTY
    layer: int | None = None
    # per query head: selected indices, and gathered host rows (current token excluded)
    indices: list = field(default_factory=list)
    K: list = field(default_factory=list)
    V: list = field(default_factory=list)

    def rows(self) -> int:
        return sum(len(i) for i in self.indices)

    def clear(self) -> None:
        self.indices, self.K, self.V = [], [], []


class DoubleBuffer:
    """Two prefetch slots; layer ``l`` always uses slot ``l % 2``."""

    def __init__(self):
        self.slots = [BufferSlot(), BufferSlot()]
        self._cond = threading.Condition()
        self._error: BaseException | None = None

    def slot_for(self, layer: int) -> BufferSlot:
        return self.slots[layer % 2]

    def mark_ready(self, slot: BufferSlot) -> None:
        with self._cond:
            slot.status = SlotStatus.READY
            self._cond.notify_all()

    def fail(self, exc: BaseException) -> None:
        with self._cond:
            self._error = exc
            self._cond.notify_all()

    def wait_ready(self, layer: int, timeout: float | None = WAIT_TIMEOUT) -> BufferSlot:
        slot = self.slot_for(layer)

        def ready():
            return self._error is not None or (slot.status is SlotStatus.READY and slot.layer == layer)

        with self._cond:
            if not self._cond.wait_for(ready, timeout=timeout):
                raise BufferNotReady(f"slot for layer {layer} never became ready")
            if self._error is not None:
                err, self._error = self._error, None
                raise err
        return slot

    def consume(self, layer: int) -> None:
        slot = self.slot_for(layer)
        with self._cond:
            if slot.status is not SlotStatus.READY or slot.layer != layer:
                raise BufferNotReady(f"consuming slot for layer {layer} in state {slot.status.value}")
            slot.status = SlotStatus.CONSUMED
            slot.clear()


class HostKvStore:
    """Full KV cache held in host memory; device reads go through :meth:`gather`."""

    def __init__(self, kv: list, elem_bytes: int = 2):
        self.kv = kv
        self.elem_bytes = elem_bytes
        self.gathered_rows = 0

    @property
    def S(self) -> int:
        return self.kv[0][0].S

    @property
    def d_h(self) -> int:
        return self.kv[0][0].d_h

    def row_bytes(self) -> int:
        """Bytes of one token's K plus V row."""
        return 2 * self.d_h * self.elem_bytes

    def nbytes(self) -> int:
        return sum(c.S for row in self.kv for c in row) * self.row_bytes()

    def gather(self, layer: int, head: int, indices, ledger: TrafficLedger | None = None):
        idx = np.asarray(indices, dtype=np.int64)
        K, V = self.kv[layer][head].gather(idx)
        self.gathered_rows += idx.size
        if ledger is not None:
            ledger.host_to_device += idx.size * self.row_bytes()
        return K, V


@dataclass
class PrefetchPlan:
    layer: int
    selections: list  # TopkResult per query head
    n_host: int  # rows resident on host when planned; index n_host is the current token


def approx_next_query(h, model: ToyModel, next_layer: int, pos: int) -> np.ndarray:
    """Query of ``next_layer`` computed from hidden state ``h``, shape ``[Hq, d_h]``."""
    if not 0 <= next_layer < model.cfg.n_layers:
        raise LayerOutOfRange(f"layer {next_layer} not in [0, {model.cfg.n_layers})")
    return model.layer_qkv(next_layer, np.reshape(h, (1, -1)), [pos])[0][0]


def _label_row(label: LabelCacheHead, k) -> np.ndarray:
    sub = np.asarray(k, dtype=np.float32)[label.channels.indices][None, :]
    if label.quantized:
        codes, scales = quantize_rows_4bit(sub)
        return dequantize(codes, scales)
    return sub


def plan_prefetch(
    q_hat,
    labels: list,
    cfg: SparsityConfig,
    model_cfg: ModelConfig,
    layer: int = 0,
    k_hat=None,
    ledger: TrafficLedger | None = None,
) -> PrefetchPlan:
    """Approximate scores and top-k per query head over a layer's label caches.

    ``k_hat`` (``[Hkv, d_h]``), when given, is the predicted key of the token
    being decoded; its label row is scored as one extra token at index ``S``.
    """
    q_hat = np.asarray(q_hat, dtype=np.float32)
    if q_hat.shape != (model_cfg.n_heads_q, model_cfg.d_h):
        raise ShapeMismatch(f"q_hat must be [{model_cfg.n_heads_q}, {model_cfg.d_h}], got {q_hat.shape}")
    n_host = labels[0].S
    extra = None
    if k_hat is not None:
        extra = [np.concatenate([lab.values(), _label_row(lab, k_hat[g])]) for g, lab in enumerate(labels)]
    selections = []
    for hq in range(model_cfg.n_heads_q):
        g = model_cfg.kv_head(hq)
        lab = labels[g]
        if extra is None:
            s_hat = approx_scores(q_hat[hq], lab.channels, lab)
        else:
            s_hat = exact_scores(q_hat[hq][lab.channels.indices], extra[g])
        selections.append(TopkResult(argtopk(s_hat, cfg.k(s_hat.shape[0])), s_hat))
        if ledger is not None:
            ledger.query_read += model_cfg.d_h * ledger.elem_bytes
            ledger.label_read += n_host * ledger.label_row_bytes(lab.r)
    return PrefetchPlan(layer, selections, n_host)


def execute_prefetch(
    store: HostKvStore,
    plan: PrefetchPlan,
    slot: BufferSlot,
    ledger: TrafficLedger | None,
    model_cfg: ModelConfig,
    buffers: DoubleBuffer | None = None,
) -> None:
    """Gather the planned host rows into ``slot`` and mark it ready."""
    if slot.status in (SlotStatus.PREFETCHING, SlotStatus.READY):
        raise SlotBusy(f"slot holds layer {slot.layer} in state {slot.status.value}")
    slot.status = SlotStatus.PREFETCHING
    slot.layer = plan.layer
    slot.clear()
    for hq, sel in enumerate(plan.selections):
        idx = sel.indices
        host_idx = idx[idx < plan.n_host]
        K, V = store.gather(plan.layer, model_cfg.kv_head(hq), host_idx, ledger)
        slot.indices.append(idx)
        slot.K.append(K)
        slot.V.append(V)
    if buffers is not None:
        buffers.mark_ready(slot)
    else:
        slot.status = SlotStatus.READY


class _PrefetchAgent:
    """Runs prefetch jobs inline (sequential) or on one worker thread."""

    def __init__(self, run, buffers: DoubleBuffer, sequential: bool):
        self.run = run
        self.buffers = buffers
        self.sequential = sequential
        if not sequential:
            self.jobs: queue.Queue = queue.Queue()
            self.thread = threading.Thread(target=self._loop, name="prefetch-agent", daemon=True)
            self.thread.start()

    def _loop(self):
        while True:
            job = self.jobs.get()
            if job is None:
                return
            try:
                self.run(*job)
            except BaseException as exc:  # surfaced to the compute agent at its next wait
                self.buffers.fail(exc)

    def submit(self, *job):
        if self.sequential:
            self.run(*job)
        else:
            self.jobs.put(job)

    def close(self):
        if not self.sequential:
            self.jobs.put(None)
            self.thread.join()


@dataclass
class OffloadStats:
    jaccard: list  # per layer: list of per-(step, head) Jaccard overlaps
    prefetch_executions: int = 0
    device_high_water: int = 0
    steps: int = 0
    # per step: (device KV high-water bytes, two-slot bound for that step's k)
    device_per_step: list = field(default_factory=list)

    def mean_jaccard(self) -> list:
        return [float(np.mean(j)) if j else float("nan") for j in self.jaccard]


class OffloadState:
    """Everything the offloaded decoder owns: host KV, device labels, the double buffer."""

    def __init__(self, model: ToyModel, store: HostKvStore, labels: list, elem_bytes: int = 2):
        self.model = model
        self.store = store
        self.labels = labels
        self.buffers = DoubleBuffer()
        self.elem_bytes = elem_bytes
        self.stats = OffloadStats([[] for _ in range(model.cfg.n_layers)])

    @classmethod
    def from_cache(cls, model: ToyModel, kv: list, channel_map: dict, quantized: bool = True, elem_bytes: int = 2):
        host = [[KvCacheHead.from_arrays(c.K, c.V, capacity=c.capacity) for c in row] for row in kv]
        labels = [
            [build_label_cache(c.K, channel_map[(layer, g)], quantized=quantized, capacity=c.capacity) for g, c in enumerate(row)]
            for layer, row in enumerate(host)
        ]
        return cls(model, HostKvStore(host, elem_bytes), labels, elem_bytes)

    def device_bound(self, cfg: SparsityConfig, n_tokens: int | None = None) -> int:
        """Two full slots: ``2 * heads * 2 * k * d_h * elem_bytes`` for ``n_tokens`` (default: all stored)."""
        mc = self.model.cfg
        k = cfg.k(self.store.S if n_tokens is None else n_tokens)
        return 2 * mc.n_heads_q * 2 * k * mc.d_h * self.elem_bytes

    def label_nbytes(self) -> int:
        return sum(lab.nbytes for row in self.labels for lab in row)


def offload_decode_step(
    state: OffloadState,
    token: int,
    cfg: SparsityConfig,
    ledger: TrafficLedger | None = None,
    *,
    sequential: bool = False,
    query_source: str = "input",
    trace: list | None = None,
) -> np.ndarray:
    """One decode step through the offload pipeline; returns logits.

    ``query_source="output"`` predicts layer ``l+1`` from layer ``l``'s output,
    which is exactly layer ``l+1``'s input: the plan then uses the true query
    and the pipeline degenerates to plain Double Sparsity (without overlap).
    """
    if query_source not in ("input", "output"):
        raise ValueError("query_source must be 'input' or 'output'")
    model, mc = state.model, state.model.cfg
    store, buffers = state.store, state.buffers
    eb = state.elem_bytes
    pos = store.S
    compute_ledger = TrafficLedger(elem_bytes=eb)
    prefetch_ledger = TrafficLedger(elem_bytes=eb)
    layer_bytes = [0] * mc.n_layers

    def prefetch(layer, h_src):
        q_hat, k_hat, _ = model.layer_qkv(layer, h_src, [pos])
        plan = plan_prefetch(q_hat[0], state.labels[layer], cfg, mc, layer=layer, k_hat=k_hat[0], ledger=prefetch_ledger)
        execute_prefetch(store, plan, buffers.slot_for(layer), prefetch_ledger, mc, buffers)

    agent = _PrefetchAgent(prefetch, buffers, sequential)
    try:
        h = model.embed([token])
        agent.submit(0, h)
        for layer in range(mc.n_layers):
            slot = buffers.wait_ready(layer)
            state.stats.prefetch_executions += 1
            q, k, v = model.layer_qkv(layer, h, [pos])
            for g in range(mc.n_heads_kv):
                append_token(state.labels[layer][g], store.kv[layer][g], k[0, g], v[0, g])
            if layer + 1 < mc.n_layers and query_source == "input":
                agent.submit(layer + 1, h)
            heads = np.empty_like(q)
            selections = []
            for hq in range(mc.n_heads_q):
                g = mc.kv_head(hq)
                idx = slot.indices[hq]
                K_sel, V_sel = slot.K[hq], slot.V[hq]
                if idx.size and idx[-1] == pos:
                    K_sel = np.concatenate([K_sel, k[0, g][None, :]])
                    V_sel = np.concatenate([V_sel, v[0, g][None, :]])
                heads[0, hq] = attend(q[0, hq], K_sel, V_sel)
                compute_ledger.kv_gather_read += 2 * idx.size * mc.d_h * eb
                layer_bytes[layer] += 2 * idx.size * mc.d_h * eb
                lab = state.labels[layer][g]
                exact = argtopk(approx_scores(q[0, hq], lab.channels, lab), cfg.k(pos + 1))
                state.stats.jaccard[layer].append(_jaccard(idx, exact))
                selections.append(idx)
            buffers.consume(layer)
            if trace is not None:
                trace.append({"layer": layer, "hidden": h[0].copy(), "selections": selections})
            h = h + model.attn_output(layer, heads)
            h = h + model.mlp(layer, h)
            if layer + 1 < mc.n_layers and query_source == "output":
                agent.submit(layer + 1, h)
    finally:
        agent.close()
    # under the handoff contract slots l and l+1 can be live together
    pairs = [layer_bytes[i] + (layer_bytes[i + 1] if i + 1 < mc.n_layers else 0) for i in range(mc.n_layers)]
    step_high = max(pairs)
    state.stats.device_per_step.append((step_high, state.device_bound(cfg, pos + 1)))
    state.stats.device_high_water = max(state.stats.device_high_water, step_high)
    state.stats.steps += 1
    if ledger is not None:
        ledger.merge(prefetch_ledger)
        ledger.merge(compute_ledger)
    return model.logits(h)[0]


def _jaccard(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    union = np.union1d(a, b).size
    return np.intersect1d(a, b).size / union if union else 1.0
