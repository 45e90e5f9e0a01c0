"""Simulator for offloaded sparse-attention KV caches with query-similarity reuse."""

__version__ = "0.1.0"

from .attention import (  # noqa: E402
    ModelShape,
    blended_attention,
    cosine_similarity,
    full_attention,
    streaming_attention,
    topk_attention,
    topk_overlap_ratio,
    topk_select_exact,
)
from .baselines import BlockCacheState, Policy, block_lookup, block_update, policy_cost  # noqa: E402
from .config import RunConfig  # noqa: E402
from .engine import DecodeEngine, DecodeMetrics, EngineConfig, Mode, TieredKVStore, approx_query  # noqa: E402
from .errors import (  # noqa: E402
    ArgumentError,
    ConfigurationError,
    ContractError,
    IndexOutOfRange,
    InvariantViolation,
    KVOffloadError,
    ModelingError,
    NumericError,
    ShapeError,
)
from .experiment import run_experiment  # noqa: E402
from .head_profile import (  # noqa: E402
    ModelProfile,
    PartitionPlan,
    build_profile,
    compute_difficulty,
    compute_threshold,
    fit_importance,
    plan_partition,
    profile_similarity,
)
from .pipeline import CostModel, PipelineTimeline, SyncMode, TransferEngine, schedule_layer, transfer_time  # noqa: E402
from .retrieval import Variant, encode, retrieve, update_metadata  # noqa: E402
from .similarity_cache import (  # noqa: E402
    HeadCache,
    SimilarityCacheState,
    aggregate_similarity,
    cache_bytes,
    lookup,
    update_entry,
)
from .workload import SyntheticModel, TraceWorkload, write_trace  # noqa: E402
