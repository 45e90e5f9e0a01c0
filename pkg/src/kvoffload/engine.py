"""Decode orchestrator over a two-tier KV store.

Per decode step and layer ``l >= 1`` the engine follows the offloaded
workflow: the approximate query for layer ``l`` (taken one layer early)
drives the cache lookup and the prefetch of missed heads, persistent heads
retrieve with the true query, and attention runs over the union of cached
top-k rows, the sink/recent window and persistent-head selections.  Every
step also produces one :class:`~kvoffload.pipeline.LayerPlan` per layer so
latency comes from the analytic pipeline model rather than wall clock.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import retrieval
from ._rows import append_row
from .attention import DEFAULT_RECENT, DEFAULT_SINK, ModelShape, attention_weights
from .baselines import BlockCacheState, Policy, StepStats, block_lookup, block_update, policy_cost
from .errors import ConfigurationError, InvariantViolation
from .head_profile import ModelProfile, PartitionPlan
from .pipeline import CostModel, LayerPlan, PipelineTimeline, SyncMode, TransferEngine, run_breakdown
from .similarity_cache import (
    SimilarityCacheState,
    SinkRecentBuffer,
    cache_bytes,
    initialize,
    lookup,
    merge_group_topk,
    update_entry,
)

HOST = "host"
DEVICE = "device_persistent"


class Mode(str, enum.Enum):
    NORMAL = "normal"
    ALWAYS_MISS = "always_miss"
    ALWAYS_HIT = "always_hit"


@dataclass(frozen=True)
class PolicyPreset:
    engine: TransferEngine
    sync_mode: SyncMode
    prefetch: bool


PRESETS = {
    Policy.SIMILARITY: PolicyPreset(TransferEngine.ZERO_COPY, SyncMode.GPU_CENTRIC, True),
    Policy.LRU: PolicyPreset(TransferEngine.GATHER_COPY, SyncMode.CPU_CENTRIC, False),
    Policy.LFU: PolicyPreset(TransferEngine.GATHER_COPY, SyncMode.CPU_CENTRIC, False),
    Policy.PREFETCH_ONLY: PolicyPreset(TransferEngine.GATHER_COPY, SyncMode.CPU_CENTRIC, True),
}


@dataclass
class EngineConfig:
    policy: Policy = Policy.SIMILARITY
    mode: Mode = Mode.NORMAL
    topk_ratio: float = 0.10
    sink_count: int = DEFAULT_SINK
    recent_count: int = DEFAULT_RECENT
    retriever: retrieval.Variant = retrieval.Variant.SIGNHASH
    hash_bits: int = retrieval.DEFAULT_HASH_BITS
    block_size: int = 32
    block_capacity_factor: float = 3.0
    seed: int = 0
    tau_override: float | None = None
    refetch_on_divergence: bool = False
    keep_outputs: bool = False
    # skip the exact-top-k reference when only hits, bytes and latency matter
    compute_oracle: bool = True
    cost: CostModel = field(default_factory=CostModel)

    def __post_init__(self):
        self.policy = Policy(self.policy)
        self.mode = Mode(self.mode)
        self.retriever = retrieval.Variant(self.retriever)
        if not 0 < self.topk_ratio <= 1:
            raise ConfigurationError("topk_ratio must lie in (0, 1]")


@dataclass
class TransferRequest:
    layer: int
    kv_head: int
    indices: np.ndarray
    nbytes: int


@dataclass
class HeadStore:
    keys: np.ndarray
    values: np.ndarray
    length: int
    tier: str
    metadata: retrieval.RetrievalMetadata

    def append(self, k_row, v_row) -> None:
        self.keys = append_row(self.keys, self.length, k_row)
        self.values = append_row(self.values, self.length, v_row)
        self.length += 1

    def window(self, sink: int, recent: int) -> np.ndarray:
        n = self.length
        return np.union1d(np.arange(min(sink, n)), np.arange(max(n - recent, 0), n)).astype(np.int64)


class TieredKVStore:
    """Per (layer, KV head) key/value rows tagged with their memory tier."""

    def __init__(self, shape: ModelShape):
        self.shape = shape
        self.heads: dict[tuple[int, int], HeadStore] = {}

    def __getitem__(self, key) -> HeadStore:
        return self.heads[key]

    def tier_bytes(self) -> dict[str, int]:
        out = {HOST: 0, DEVICE: 0}
        row = self.shape.row_bytes()
        for hs in self.heads.values():
            out[hs.tier] += 2 * hs.length * row
        return out


@dataclass
class DecodeMetrics:
    hits: np.ndarray
    misses: np.ndarray
    transferred_bytes: int = 0
    init_transfer_bytes: int = 0
    refetch_bytes: int = 0
    persistent_served_bytes: int = 0
    miss_events: int = 0
    errors: list = field(default_factory=list)
    block_hits: int = 0
    block_lookups: int = 0

    @property
    def hit_ratio(self) -> float:
        total = int(self.hits.sum() + self.misses.sum())
        return float(self.hits.sum()) / total if total else float("nan")

    def head_hit_ratio(self) -> np.ndarray:
        total = self.hits + self.misses
        return np.divide(self.hits, total, out=np.full(total.shape, np.nan), where=total > 0)

    def summary(self) -> dict:
        errs = np.asarray(self.errors) if self.errors else np.zeros(0)
        return {
            "hit_ratio": self.hit_ratio,
            "hits": int(self.hits.sum()),
            "misses": int(self.misses.sum()),
            "transferred_bytes": self.transferred_bytes,
            "init_transfer_bytes": self.init_transfer_bytes,
            "refetch_bytes": self.refetch_bytes,
            "persistent_served_bytes": self.persistent_served_bytes,
            "mean_rel_error": float(errs.mean()) if errs.size else None,
            "max_rel_error": float(errs.max()) if errs.size else None,
            "block_hit_ratio": self.block_hits / self.block_lookups if self.block_lookups else None,
        }


@dataclass
class StepResult:
    outputs: np.ndarray
    oracle: np.ndarray
    rel_error: float
    layer_plans: list[LayerPlan]
    transfers: list[TransferRequest]


@dataclass
class RunResult:
    metrics: DecodeMetrics
    timeline: PipelineTimeline
    outputs: list
    oracle_outputs: list
    cache_bytes: int
    tier_bytes: dict
    k: int


def topk_size(topk_ratio: float, n_prompt: int) -> int:
    return max(1, min(n_prompt, math.ceil(topk_ratio * n_prompt - 1e-9)))


def _attend(q_rows: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    Kf = np.asarray(K, dtype=np.float64)
    Vf = np.asarray(V, dtype=np.float64)
    return np.stack([attention_weights(q, Kf) @ Vf for q in q_rows])


class DecodeEngine:
    def __init__(self, workload, profile: ModelProfile, plan: PartitionPlan, config: EngineConfig | None = None):
        self.workload = workload
        self.shape: ModelShape = workload.shape
        self.profile = profile
        self.plan = plan
        self.cfg = config or EngineConfig()
        self.preset = PRESETS[self.cfg.policy]
        s = self.shape
        if profile.num_layers != s.num_layers or profile.num_kv_heads != s.num_kv_heads:
            raise ConfigurationError("profile does not match the model shape")
        if len(plan.layers) != s.num_layers:
            raise ConfigurationError("partition plan does not match the model shape")
        if sorted(plan.layers[0].persistent) != list(range(s.num_kv_heads)):
            raise ConfigurationError("every layer-0 head must be persistent")
        self.k = topk_size(self.cfg.topk_ratio, workload.n_prompt)
        self.mem_head = 2 * self.k * s.row_bytes()
        self.taus = profile.taus()
        if self.cfg.tau_override is not None:
            self.taus = np.full_like(self.taus, self.cfg.tau_override)
        self.q_weights = profile.q_importance()
        self.store = TieredKVStore(s)
        self.cache = SimilarityCacheState(self.k, self.cfg.sink_count, self.cfg.recent_count)
        self.blocks: dict[tuple[int, int], BlockCacheState] = {}
        self.metrics = DecodeMetrics(hits=np.zeros((s.num_layers, s.num_kv_heads), dtype=np.int64),
                                     misses=np.zeros((s.num_layers, s.num_kv_heads), dtype=np.int64))
        self.step_index = 0
        self.step_plans: list[list[LayerPlan]] = []
        self.outputs: list = []
        self.oracle_outputs: list = []
        self._prefilled = False

    # -- helpers -----------------------------------------------------------

    def offloaded(self, layer: int, kv_head: int) -> bool:
        return not self.plan.is_persistent(layer, kv_head)

    def _group(self, layer: int, kv_head: int, q: np.ndarray) -> np.ndarray:
        return q[layer, self.shape.q_heads_of(kv_head).start:self.shape.q_heads_of(kv_head).stop]

    def _select(self, hs: HeadStore, q_group: np.ndarray) -> np.ndarray:
        return merge_group_topk(retrieval.scores(q_group, hs.metadata), self.k)

    def _exact_select(self, hs: HeadStore, q_group: np.ndarray, n: int) -> np.ndarray:
        # shares the exact retriever's scoring routine so tie-breaking agrees
        scores = retrieval.exact_scores(np.asarray(q_group, dtype=np.float64), hs.keys[:n])
        return merge_group_topk(scores, self.k)

    # -- prefill -------------------------------------------------------------

    def prefill(self) -> None:
        s = self.shape
        cfg = self.cfg
        K, V = self.workload.prompt_kv()
        n = self.workload.n_prompt
        extra = self.workload.n_steps
        first = self.workload.step(0)
        for l in range(s.num_layers):
            for h in range(s.num_kv_heads):
                # keys stay in float64 so scoring never re-copies the store
                keys = np.empty((n + extra, s.head_dim), dtype=np.float64)
                values = np.empty((n + extra, s.head_dim), dtype=V.dtype)
                keys[:n] = K[l, h]
                values[:n] = V[l, h]
                meta = retrieval.encode(keys[:n], cfg.retriever, seed=[cfg.seed, l, h], hash_bits=cfg.hash_bits)
                if meta.variant is retrieval.Variant.EXACT:
                    meta.keys = keys
                tier = HOST if self.offloaded(l, h) else DEVICE
                hs = HeadStore(keys, values, n, tier, meta)
                self.store.heads[(l, h)] = hs
                if tier == DEVICE:
                    continue
                buf = SinkRecentBuffer.from_prompt(K[l, h], V[l, h], cfg.sink_count, cfg.recent_count)
                q0 = self._group(l, h, first.q_true)
                idx = self._select(hs, q0)
                if cfg.policy is Policy.SIMILARITY:
                    cache = self.cache.add_head(l, h, buf)
                    initialize(cache, q0, idx, hs.keys[idx], hs.values[idx], step=0)
                    self.metrics.init_transfer_bytes += self.mem_head
                else:
                    self.cache.buffers[(l, h)] = buf
                    if cfg.policy in (Policy.LRU, Policy.LFU):
                        cap = max(1, math.ceil(cfg.block_capacity_factor * self.k / cfg.block_size))
                        bs = BlockCacheState(cfg.policy, cap, cfg.block_size,
                                             block_bytes=2 * cfg.block_size * s.row_bytes())
                        plan = block_lookup(bs, idx)
                        block_update(bs, plan, plan.miss_blocks)
                        self.metrics.init_transfer_bytes += len(plan.miss_blocks) * bs.block_bytes
                        bs.counters.__init__()
                        self.blocks[(l, h)] = bs
        self._prefilled = True

    # -- decode ----------------------------------------------------------------

    def _check_request(self, req: TransferRequest) -> None:
        if self.store[(req.layer, req.kv_head)].tier != HOST:
            raise InvariantViolation(f"transfer requested for persistent head L{req.layer}.H{req.kv_head}")

    def decode_step(self) -> StepResult:
        if not self._prefilled:
            raise ConfigurationError("prefill() must run before decode_step()")
        self.step_index += 1
        t = self.step_index
        s = self.shape
        cfg = self.cfg
        cost = cfg.cost
        policy = cfg.policy
        inp = self.workload.step(t)
        row_bytes = s.row_bytes()
        n = self.workload.n_prompt + t - 1     # rows visible to retrieval this step

        selections: dict[tuple[int, int], np.ndarray] = {}
        transfers: list[TransferRequest] = []
        plans: list[LayerPlan] = []

        # phase 1: lookups, retrieval and transfer requests against the first n rows
        for l in range(s.num_layers):
            miss_bytes = 0
            refetch = 0
            retrieved = 0
            stats_blocks = 0
            stats_merge = 0
            missed_heads = 0
            offloaded_heads = 0
            for h in range(s.num_kv_heads):
                hs = self.store[(l, h)]
                q_true = self._group(l, h, inp.q_true)
                if hs.tier == DEVICE:
                    selections[(l, h)] = self._select(hs, q_true)
                    retrieved += 1
                    self.metrics.persistent_served_bytes += self.mem_head
                    continue
                offloaded_heads += 1
                q_apx = self._group(l, h, inp.q_approx)
                if policy is Policy.SIMILARITY:
                    cache = self.cache.heads[(l, h)]
                    force = {Mode.ALWAYS_MISS: "miss", Mode.ALWAYS_HIT: "hit"}.get(cfg.mode)
                    res = lookup(cache, q_apx, self.q_weights[l, s.q_heads_of(h).start:s.q_heads_of(h).stop],
                                 float(self.taus[l, h]), force=force)
                    if res.hit:
                        self.metrics.hits[l, h] += 1
                    else:
                        self.metrics.misses[l, h] += 1
                        idx = self._select(hs, q_apx)
                        retrieved += 1
                        req = TransferRequest(l, h, idx, self.mem_head)
                        self._check_request(req)
                        transfers.append(req)
                        miss_bytes += req.nbytes
                        missed_heads += 1
                        update_entry(cache, idx, hs.keys[idx], hs.values[idx], step=t)
                        if cfg.refetch_on_divergence:
                            refetch += self._divergence_bytes(hs, q_true, idx)
                    selections[(l, h)] = cache.indices
                elif policy is Policy.PREFETCH_ONLY:
                    idx = self._select(hs, q_apx)
                    retrieved += 1
                    req = TransferRequest(l, h, idx, self.mem_head)
                    self._check_request(req)
                    transfers.append(req)
                    miss_bytes += req.nbytes
                    self.metrics.misses[l, h] += 1
                    if cfg.refetch_on_divergence:
                        refetch += self._divergence_bytes(hs, q_true, idx)
                    selections[(l, h)] = idx
                else:
                    idx = self._select(hs, q_true)
                    retrieved += 1
                    bs = self.blocks[(l, h)]
                    access = block_lookup(bs, idx)
                    nbytes = len(access.miss_blocks) * bs.block_bytes
                    if access.miss_blocks:
                        req = TransferRequest(l, h, np.asarray(access.miss_blocks), nbytes)
                        self._check_request(req)
                        transfers.append(req)
                    block_update(bs, access, access.miss_blocks)
                    miss_bytes += nbytes
                    stats_blocks += access.accessed
                    stats_merge += nbytes
                    self.metrics.block_hits += len(access.hit_blocks)
                    self.metrics.block_lookups += access.accessed
                    if access.miss_blocks:
                        self.metrics.misses[l, h] += 1
                    else:
                        self.metrics.hits[l, h] += 1
                    selections[(l, h)] = idx

            if policy is Policy.SIMILARITY:
                self.metrics.miss_events += missed_heads
            stats = StepStats(accessed_blocks=stats_blocks, merge_bytes=stats_merge, missed_heads=missed_heads)
            plans.append(LayerPlan(
                layer=l,
                miss_bytes=miss_bytes,
                refetch_bytes=refetch,
                mgmt_time=policy_cost(policy, stats, cost),
                retrieval_time=cost.c_retrieval_per_token * n * retrieved,
                n_sync_events=self._sync_events(policy, offloaded_heads, miss_bytes),
            ))
            self.metrics.transferred_bytes += miss_bytes
            self.metrics.refetch_bytes += refetch

        # phase 2: the new token joins stores, metadata and windows
        if inp.new_k is not None:
            for (l, h), hs in self.store.heads.items():
                hs.append(inp.new_k[l, h], inp.new_v[l, h])
                if hs.metadata.variant is retrieval.Variant.EXACT:
                    retrieval.update_metadata(hs.metadata, inp.new_k[l, h], keys=hs.keys)
                else:
                    retrieval.update_metadata(hs.metadata, inp.new_k[l, h])
                buf = self.cache.buffers.get((l, h))
                if buf is not None:
                    buf.advance(inp.new_k[l, h], inp.new_v[l, h])

        # phase 3: attention over deduplicated token sets, plus the exact oracle
        out = np.zeros((s.num_layers, s.num_q_heads, s.head_dim))
        ref = np.zeros_like(out)
        for l in range(s.num_layers):
            for h in range(s.num_kv_heads):
                hs = self.store[(l, h)]
                q_true = self._group(l, h, inp.q_true)
                qs = s.q_heads_of(h)
                window = hs.window(cfg.sink_count, cfg.recent_count)
                if policy is Policy.SIMILARITY and hs.tier == HOST:
                    out[l, qs.start:qs.stop] = self._attend_cached(l, h, q_true)
                else:
                    pos = np.union1d(selections[(l, h)], window)
                    out[l, qs.start:qs.stop] = _attend(q_true, hs.keys[pos], hs.values[pos])
                if cfg.compute_oracle:
                    oracle_pos = np.union1d(self._exact_select(hs, q_true, n), window)
                    ref[l, qs.start:qs.stop] = _attend(q_true, hs.keys[oracle_pos], hs.values[oracle_pos])

        err = float("nan")
        if cfg.compute_oracle:
            err = float(np.linalg.norm(out - ref) / max(np.linalg.norm(ref), 1e-300))
            self.metrics.errors.append(err)
        self.step_plans.append(plans)
        if cfg.keep_outputs:
            self.outputs.append(out)
            self.oracle_outputs.append(ref)
        return StepResult(out, ref, err, plans, transfers)

    def _attend_cached(self, layer: int, kv_head: int, q_rows: np.ndarray) -> np.ndarray:
        """Hybrid attention reading the cache entry and the window buffer directly."""
        cache = self.cache.heads[(layer, kv_head)]
        wpos, wk, wv = self.cache.buffers[(layer, kv_head)].rows()
        dup = np.isin(cache.indices, wpos)
        pos = np.concatenate([cache.indices[~dup], wpos])
        K = np.vstack([cache.keys[~dup], wk])
        V = np.vstack([cache.values[~dup], wv])
        if np.unique(pos).size != pos.size:
            raise InvariantViolation("attention input contains duplicate token positions")
        order = np.argsort(pos, kind="stable")
        return _attend(q_rows, K[order], V[order])

    def _divergence_bytes(self, hs: HeadStore, q_true: np.ndarray, fetched: np.ndarray) -> int:
        wanted = self._select(hs, q_true)
        return int(np.setdiff1d(wanted, fetched).size) * 2 * self.shape.row_bytes()

    @staticmethod
    def _sync_events(policy: Policy, offloaded_heads: int, miss_bytes: int) -> int:
        if offloaded_heads == 0:
            return 0
        if policy is Policy.SIMILARITY:
            return 1 if miss_bytes else 0
        if policy is Policy.PREFETCH_ONLY:
            # one readiness wait per head transfer
            return offloaded_heads
        # block caches: index/plan exchange plus the KV transfer when anything missed
        return 1 + (1 if miss_bytes else 0)

    def timeline(self) -> PipelineTimeline:
        p = self.preset
        return run_breakdown(self.step_plans, self.cfg.cost, p.sync_mode, p.prefetch, p.engine)

    def run(self, n_steps: int | None = None) -> RunResult:
        if not self._prefilled:
            self.prefill()
        steps = self.workload.n_steps if n_steps is None else n_steps
        for _ in range(steps):
            self.decode_step()
        return RunResult(
            metrics=self.metrics,
            timeline=self.timeline(),
            outputs=self.outputs,
            oracle_outputs=self.oracle_outputs,
            cache_bytes=cache_bytes(self.cache, self.shape) if self.cache.heads else 0,
            tier_bytes=self.store.tier_bytes(),
            k=self.k,
        )


def approx_query(x_prev_layer, w_q_next, q_bias=None, num_heads: int | None = None) -> np.ndarray:
    """Query for the next layer computed from the current layer's input state."""
    x = np.asarray(x_prev_layer, dtype=np.float64)
    W = np.asarray(w_q_next, dtype=np.float64)
    if x.shape[-1] != W.shape[0]:
        raise ConfigurationError(f"hidden size {x.shape[-1]} does not match W_Q rows {W.shape[0]}")
    q = x @ W
    if num_heads is not None:
        q = q.reshape(q.shape[:-1] + (num_heads, -1))
    if q_bias is not None:
        q = q + q_bias
    return q
