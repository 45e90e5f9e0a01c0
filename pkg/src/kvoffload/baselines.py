"""Block-granularity LRU/LFU caches and per-step management cost.

These model host-managed block caches: token indices map to fixed-size
blocks, every accessed block gets a list update each step, and missed blocks
are merged into the cache buffer after the transfer.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ContractError
from .pipeline import CostModel

DEFAULT_BLOCK_SIZE = 32


class Policy(str, enum.Enum):
    SIMILARITY = "similarity"
    LRU = "lru"
    LFU = "lfu"
    PREFETCH_ONLY = "prefetch_only"


@dataclass(frozen=True)
class AccessPlan:
    hit_blocks: tuple[int, ...]
    miss_blocks: tuple[int, ...]

    @property
    def accessed(self) -> int:
        return len(self.hit_blocks) + len(self.miss_blocks)


@dataclass
class BlockCounters:
    lookups: int = 0
    hits: int = 0
    misses: int = 0
    metadata_updates: int = 0
    buffer_merge_bytes: int = 0
    evictions: int = 0


@dataclass
class BlockCacheState:
    policy: Policy
    capacity: int
    block_size: int = DEFAULT_BLOCK_SIZE
    block_bytes: int = 0
    # LRU: iteration order is recency (oldest first); LFU: insertion order
    index_map: OrderedDict = field(default_factory=OrderedDict)
    counts: dict = field(default_factory=dict)
    inserted_at: dict = field(default_factory=dict)
    free_slots: list = field(default_factory=list)
    counters: BlockCounters = field(default_factory=BlockCounters)
    _clock: int = 0

    def __post_init__(self):
        self.policy = Policy(self.policy)
        if self.policy not in (Policy.LRU, Policy.LFU):
            raise ArgumentError(f"block caches support lru/lfu, not {self.policy.value}")
        if self.capacity < 1 or self.block_size < 1:
            raise ArgumentError("capacity and block_size must be positive")
        self.free_slots = list(range(self.capacity - 1, -1, -1))

    def __contains__(self, block: int) -> bool:
        return block in self.index_map

    def __len__(self) -> int:
        return len(self.index_map)

    def blocks(self) -> set[int]:
        return set(self.index_map)

    def hit_ratio(self) -> float:
        c = self.counters
        return c.hits / c.lookups if c.lookups else 0.0

    def _victim(self) -> int:
        if self.policy is Policy.LRU:
            return next(iter(self.index_map))
        return min(self.index_map, key=lambda b: (self.counts[b], self.inserted_at[b]))

    def _evict(self, block: int) -> None:
        self.free_slots.append(self.index_map.pop(block))
        self.counts.pop(block, None)
        self.inserted_at.pop(block, None)
        self.counters.evictions += 1

    def _insert(self, block: int) -> None:
        if len(self.index_map) >= self.capacity:
            self._evict(self._victim())
        self.index_map[block] = self.free_slots.pop()
        self.counts[block] = 1
        self.inserted_at[block] = self._clock
        self._clock += 1

    def _touch(self, block: int) -> None:
        if self.policy is Policy.LRU:
            self.index_map.move_to_end(block)
        else:
            self.counts[block] += 1


def blocks_of(indices, block_size: int) -> np.ndarray:
    return np.unique(np.asarray(indices, dtype=np.int64) // block_size)


def _block_list(indices, block_size: int) -> list[int]:
    # short plain sequences skip numpy's per-call overhead
    if isinstance(indices, (list, tuple)) and len(indices) <= 64:
        return sorted({int(i) // block_size for i in indices})
    return blocks_of(indices, block_size).tolist()


def block_lookup(state: BlockCacheState, topk_indices) -> AccessPlan:
    """Split the blocks touched by ``topk_indices`` into hits and misses."""
    cached = state.index_map
    hits, misses = [], []
    for b in _block_list(topk_indices, state.block_size):
        (hits if b in cached else misses).append(b)
    return AccessPlan(tuple(hits), tuple(misses))


def block_update(state: BlockCacheState, plan: AccessPlan, fetched_blocks) -> BlockCacheState:
    """Promote hits, then insert the fetched misses in ascending block order."""
    planned = sorted(plan.miss_blocks)
    fetched = planned if fetched_blocks is plan.miss_blocks else sorted({int(b) for b in fetched_blocks})
    if fetched != planned:
        raise ContractError(f"fetched blocks {fetched} do not match planned misses {list(plan.miss_blocks)}")
    for b in plan.hit_blocks:
        if b not in state.index_map:
            raise ContractError(f"planned hit block {b} is no longer cached")
        state._touch(b)
    for b in fetched:
        state._insert(b)
    n_hit, n_miss = len(plan.hit_blocks), len(fetched)
    c = state.counters
    c.lookups += n_hit + n_miss
    c.hits += n_hit
    c.misses += n_miss
    c.metadata_updates += n_hit + n_miss
    c.buffer_merge_bytes += n_miss * state.block_bytes
    return state


@dataclass(frozen=True)
class StepStats:
    accessed_blocks: int = 0
    merge_bytes: int = 0
    missed_heads: int = 0


def policy_cost(policy: Policy | str, stats: StepStats, cost: CostModel) -> float:
    """Cache-management time charged to one layer for one step."""
    policy = Policy(policy)
    if policy in (Policy.LRU, Policy.LFU):
        return ((cost.c_lookup + cost.c_list_update) * stats.accessed_blocks
                + cost.c_merge_per_byte * stats.merge_bytes)
    if policy is Policy.SIMILARITY:
        return cost.c_label_update * stats.missed_heads
    return 0.0
