"""Head-granularity approximate KV cache keyed on query cosine similarity.

Each offloaded KV head keeps one query label per member query head, the
top-k rows selected for that label, and a never-evicted sink/recent window.
A lookup compares incoming queries with the labels; a miss replaces the
labels in the same call and leaves the entry waiting for its new rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .attention import DEFAULT_RECENT, DEFAULT_SINK, ModelShape, cosine_rows, select_top
from .errors import ArgumentError, ContractError, ShapeError

HIT = "hit"
MISS = "miss"

REASON_HIT = "hit"
REASON_BELOW = "below_threshold"
REASON_INVALID_LABEL = "invalid_label"
REASON_FORCED = "forced"


def aggregate_similarity(sims, weights) -> float:
    """Importance-weighted harmonic mean of per-query-head similarities.

    Requires every similarity to be positive.  All-zero weights fall back to
    equal weights.
    """
    sims = np.asarray(sims, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if sims.shape != w.shape or sims.ndim != 1 or sims.size == 0:
        raise ShapeError("sims and weights must be equal-length non-empty vectors")
    if np.any(w < 0):
        raise ArgumentError("importance weights must be non-negative")
    if np.any(sims <= 0):
        raise ArgumentError("harmonic aggregation is undefined for non-positive similarities")
    if not w.any():
        w = np.ones_like(w)
    # rescale so subnormal weights keep full precision
    w = w / w.max()
    return float(w.sum() / np.sum(w / sims))


def group_similarity(sims, weights) -> float:
    """Aggregate used for the hit test.

    With a non-positive member the harmonic form breaks down; the group then
    takes its smallest member similarity, which keeps the decision at least
    as strict as any member alone.
    """
    sims = np.asarray(sims, dtype=np.float64)
    if np.any(sims <= 0):
        return float(sims.min())
    return aggregate_similarity(sims, weights)


@dataclass
class LookupResult:
    hit: bool
    aggregated: float | None
    sims: np.ndarray
    reason: str

    @property
    def status(self) -> str:
        return HIT if self.hit else MISS


@dataclass
class HeadCache:
    """Cache state of one offloaded KV head."""

    capacity: int
    labels: np.ndarray | None = None
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    keys: np.ndarray | None = None
    values: np.ndarray | None = None
    hit_count: int = 0
    miss_count: int = 0
    last_update_step: int | None = None
    history: list = field(default_factory=list)
    awaiting_update: bool = False

    def labels_valid(self) -> bool:
        if self.labels is None:
            return False
        if not np.all(np.isfinite(self.labels)):
            return False
        return bool(np.all(np.linalg.norm(self.labels, axis=1) > 0))

    def summary(self) -> dict:
        return {
            "hit_count": self.hit_count,
            "miss_count": self.miss_count,
            "last_update_step": self.last_update_step,
            "similarity_history_length": len(self.history),
        }


def lookup(cache: HeadCache, q_group, weights, tau: float, *, force: str | None = None) -> LookupResult:
    """Hit test for one KV head, fused with the label refresh on a miss.

    ``force`` may be ``"hit"`` or ``"miss"`` to override the decision (oracle
    modes); a forced hit still requires valid labels.
    """
    q_group = np.atleast_2d(np.asarray(q_group, dtype=np.float64))
    if q_group.shape[0] < 1:
        raise ShapeError("q_group needs at least one query head")
    if cache.awaiting_update:
        raise ContractError("previous miss has not been followed by update_entry")

    if not cache.labels_valid():
        sims = np.zeros(q_group.shape[0])
        result = LookupResult(False, None, sims, REASON_INVALID_LABEL)
    else:
        if cache.labels.shape != q_group.shape:
            raise ShapeError(f"labels {cache.labels.shape} vs queries {q_group.shape}")
        sims = cosine_rows(q_group, cache.labels)
        agg = group_similarity(sims, weights)
        if force == "miss":
            result = LookupResult(False, agg, sims, REASON_FORCED)
        elif force == "hit":
            result = LookupResult(True, agg, sims, REASON_FORCED)
        elif agg >= tau:
            result = LookupResult(True, agg, sims, REASON_HIT)
        else:
            result = LookupResult(False, agg, sims, REASON_BELOW)

    if result.hit:
        cache.hit_count += 1
    else:
        cache.miss_count += 1
        cache.labels = q_group.copy()
        cache.awaiting_update = True
    if result.aggregated is not None:
        cache.history.append(result.aggregated)
    return result


def update_entry(cache: HeadCache, new_indices, new_K, new_V, step: int | None = None) -> HeadCache:
    """Replace the cached rows wholesale after a miss."""
    if not cache.awaiting_update:
        raise ContractError("update_entry called on a head that did not miss")
    idx = np.asarray(new_indices, dtype=np.int64)
    if idx.size > cache.capacity:
        raise ArgumentError(f"{idx.size} indices exceed cache capacity {cache.capacity}")
    if np.unique(idx).size != idx.size:
        raise ArgumentError("cached indices must be duplicate-free")
    K = np.asarray(new_K, dtype=np.float64)
    V = np.asarray(new_V, dtype=np.float64)
    if K.shape[0] != idx.size or V.shape[0] != idx.size:
        raise ShapeError("row count does not match index count")
    order = np.argsort(idx)
    cache.indices = idx[order]
    cache.keys = K[order]
    cache.values = V[order]
    cache.last_update_step = step
    cache.awaiting_update = False
    return cache


def initialize(cache: HeadCache, q_group, indices, K, V, step: int = 0) -> HeadCache:
    """Step-0 fill: store the first labels and their top-k rows."""
    cache.labels = np.atleast_2d(np.asarray(q_group, dtype=np.float64)).copy()
    cache.awaiting_update = True
    return update_entry(cache, indices, K, V, step)


def merge_group_topk(score_rows, k: int) -> np.ndarray:
    """Merge per-query-head top-k proposals into one KV-head index set.

    Each row of ``score_rows`` proposes its own top-k; the union is ranked by
    the best score any head gives an index and cut back to ``k``.
    """
    S = np.atleast_2d(np.asarray(score_rows, dtype=np.float64))
    n = S.shape[1]
    if not 1 <= k <= n:
        raise ArgumentError(f"k must satisfy 1 <= k <= n={n}, got {k}")
    proposals = np.unique(np.concatenate([select_top(row, k) for row in S]))
    best = S[:, proposals].max(axis=0)
    return np.sort(proposals[select_top(best, k)])


class SinkRecentBuffer:
    """First ``sink_count`` tokens plus a sliding window of the latest ones."""

    def __init__(self, head_dim: int, sink_count: int = DEFAULT_SINK, recent_count: int = DEFAULT_RECENT):
        if sink_count < 0 or recent_count < 0:
            raise ArgumentError("window sizes must be non-negative")
        self.sink_count = sink_count
        self.recent_count = recent_count
        self.head_dim = head_dim
        self.sink_keys = np.zeros((sink_count, head_dim))
        self.sink_values = np.zeros((sink_count, head_dim))
        self.ring_keys = np.zeros((recent_count, head_dim))
        self.ring_values = np.zeros((recent_count, head_dim))
        self.ring_positions = np.full(recent_count, -1, dtype=np.int64)
        self.ring_pos = 0
        self.num_tokens = 0

    @classmethod
    def from_prompt(cls, K, V, sink_count: int = DEFAULT_SINK, recent_count: int = DEFAULT_RECENT):
        K = np.asarray(K, dtype=np.float64)
        V = np.asarray(V, dtype=np.float64)
        buf = cls(K.shape[1], sink_count, recent_count)
        n = K.shape[0]
        s = min(n, sink_count)
        buf.sink_keys[:s] = K[:s]
        buf.sink_values[:s] = V[:s]
        start = max(s, n - recent_count)
        for pos in range(start, n):
            buf._push(pos, K[pos], V[pos])
        buf.num_tokens = n
        return buf

    def _push(self, pos: int, k_row, v_row):
        if self.recent_count == 0:
            return
        slot = self.ring_pos
        self.ring_keys[slot] = k_row
        self.ring_values[slot] = v_row
        self.ring_positions[slot] = pos
        self.ring_pos = (slot + 1) % self.recent_count

    def advance(self, k_row, v_row) -> "SinkRecentBuffer":
        pos = self.num_tokens
        if pos < self.sink_count:
            self.sink_keys[pos] = k_row
            self.sink_values[pos] = v_row
        else:
            self._push(pos, k_row, v_row)
        self.num_tokens += 1
        return self

    def __len__(self) -> int:
        n = self.num_tokens
        return min(n, self.sink_count) + min(max(n - self.sink_count, 0), self.recent_count)

    def positions(self) -> np.ndarray:
        sink = np.arange(min(self.num_tokens, self.sink_count), dtype=np.int64)
        recent = self.ring_positions[self.ring_positions >= 0]
        return np.sort(np.concatenate([sink, recent]))

    def rows(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(positions, keys, values) sorted by token position."""
        s = min(self.num_tokens, self.sink_count)
        live = self.ring_positions >= 0
        pos = np.concatenate([np.arange(s, dtype=np.int64), self.ring_positions[live]])
        K = np.vstack([self.sink_keys[:s], self.ring_keys[live]])
        V = np.vstack([self.sink_values[:s], self.ring_values[live]])
        order = np.argsort(pos, kind="stable")
        return pos[order], K[order], V[order]


def advance_recent(buffer: SinkRecentBuffer, new_k_row, new_v_row) -> SinkRecentBuffer:
    return buffer.advance(new_k_row, new_v_row)


@dataclass
class SimilarityCacheState:
    """All head caches and window buffers of one sequence."""

    capacity: int
    sink_count: int = DEFAULT_SINK
    recent_count: int = DEFAULT_RECENT
    heads: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def add_head(self, layer: int, kv_head: int, buffer: SinkRecentBuffer | None = None) -> HeadCache:
        cache = HeadCache(capacity=self.capacity)
        self.heads[(layer, kv_head)] = cache
        if buffer is not None:
            self.buffers[(layer, kv_head)] = buffer
        return cache

    def layers(self) -> list[int]:
        return sorted({layer for layer, _ in self.heads})

    def dump(self) -> dict:
        return {
            f"L{layer}.H{head}": cache.summary()
            for (layer, head), cache in sorted(self.heads.items())
        }

    def dumps(self) -> str:
        return json.dumps(self.dump(), indent=2, sort_keys=True)


def cache_bytes(state: SimilarityCacheState, shape: ModelShape) -> int:
    """Device bytes held by the similarity cache.

    Counts the top-k rows and the sink/recent window of every offloaded head,
    plus one label per query head for each layer that has offloaded heads.
    """
    row = shape.row_bytes()
    n_heads = len(state.heads)
    kv_rows = n_heads * 2 * state.capacity * row
    window = n_heads * 2 * (state.sink_count + state.recent_count) * row
    labels = len(state.layers()) * shape.num_q_heads * row
    return kv_rows + window + labels
