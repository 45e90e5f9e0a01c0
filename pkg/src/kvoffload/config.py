"""Run configuration: a flat JSON document validated field by field."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .attention import DEFAULT_RECENT, DEFAULT_SINK, ModelShape
from .baselines import DEFAULT_BLOCK_SIZE, Policy
from .engine import Mode
from .errors import ArgumentError, ConfigurationError
from .head_profile import DEFAULT_EPSILON, DEFAULT_ETA, DEFAULT_P
from .pipeline import CostModel
from .retrieval import DEFAULT_HASH_BITS, Variant

DEFAULT_SEED = 0
DEFAULT_SIGMA = 0.03


@dataclass
class RunConfig:
    # model shape
    num_layers: int = 4
    num_q_heads: int = 8
    num_kv_heads: int = 4
    head_dim: int = 128
    bytes_per_element: int = 2
    # synthetic workload
    hidden_dim: int = 256
    layer_drift: float = 0.1
    query_bias: float = 1.0
    prompt_sigma: float = 0.003
    importance_beta: list = field(default_factory=lambda: [1.0, 0.6])
    n_prompt: int = 8192
    steps: int = 32
    trace: str | None = None
    # experiment grid
    policies: list = field(default_factory=lambda: [Policy.SIMILARITY.value])
    sigmas: list = field(default_factory=lambda: [DEFAULT_SIGMA])
    topk_ratios: list = field(default_factory=lambda: [0.10])
    seeds: list = field(default_factory=lambda: [DEFAULT_SEED])
    # caching
    eta: float = DEFAULT_ETA
    p: float = DEFAULT_P
    epsilon: float = DEFAULT_EPSILON
    sink: int = DEFAULT_SINK
    recent: int = DEFAULT_RECENT
    retriever: str = Variant.SIGNHASH.value
    hash_bits: int = DEFAULT_HASH_BITS
    block_size: int = DEFAULT_BLOCK_SIZE
    block_capacity_factor: float = 3.0
    mode: str = Mode.NORMAL.value
    tau_override: float | None = None
    refetch_on_divergence: bool = False
    compute_oracle: bool = True
    # offline profiling
    profile_sequences: int = 30
    profile_steps: int = 16
    profile_sigma: float | None = None
    importance_samples: int = 8
    importance_noise: float = 0.0
    importance_file: str | None = None
    # placement and cost model
    hbm_budget: float | None = None
    cost: dict = field(default_factory=lambda: CostModel().to_dict())
    # execution
    workers: int = 1
    output_dir: str | None = None

    def __post_init__(self):
        self.validate()

    # -- validation -----------------------------------------------------------

    def validate(self) -> "RunConfig":
        try:
            ModelShape(self.num_layers, self.num_q_heads, self.num_kv_heads, self.head_dim,
                       self.bytes_per_element)
        except Exception as exc:
            raise ConfigurationError(str(exc)) from exc
        _positive_int(self, "hidden_dim", "n_prompt", "hash_bits", "block_size",
                      "profile_sequences", "importance_samples", "workers")
        if not isinstance(self.steps, int) or isinstance(self.steps, bool) or self.steps < 0:
            raise ConfigurationError("steps must be a non-negative integer")
        if self.profile_steps < 2:
            raise ConfigurationError("profile_steps must be at least 2")
        for name in ("layer_drift", "query_bias", "prompt_sigma", "importance_noise"):
            _finite(self, name, lo=0.0)
        if (not isinstance(self.importance_beta, list) or len(self.importance_beta) != 2
                or not all(_is_number(x) and x > 0 for x in self.importance_beta)):
            raise ConfigurationError("importance_beta must be two positive numbers")
        for name in ("policies", "sigmas", "topk_ratios", "seeds"):
            v = getattr(self, name)
            if not isinstance(v, list) or not v:
                raise ConfigurationError(f"{name} must be a non-empty list")
        try:
            self.policies = [Policy(x).value for x in self.policies]
            self.retriever = Variant(self.retriever).value
            self.mode = Mode(self.mode).value
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        if len(set(self.policies)) != len(self.policies):
            raise ConfigurationError("policies must not repeat")
        for s in self.sigmas:
            if not _is_number(s) or s < 0:
                raise ConfigurationError(f"sigma must be a non-negative number, got {s!r}")
        for r in self.topk_ratios:
            if not _is_number(r) or not 0 < r <= 1:
                raise ConfigurationError(f"topk ratio must lie in (0, 1], got {r!r}")
        for s in self.seeds:
            if not isinstance(s, int) or isinstance(s, bool) or s < 0:
                raise ConfigurationError(f"seeds must be non-negative integers, got {s!r}")
        if not -1 < self.eta <= 1:
            raise ConfigurationError("eta must lie in (-1, 1]")
        if self.p < 1:
            raise ConfigurationError("p must be >= 1")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if self.sink < 0 or self.recent < 0:
            raise ConfigurationError("sink and recent counts must be non-negative")
        if self.block_capacity_factor <= 0:
            raise ConfigurationError("block_capacity_factor must be positive")
        if self.tau_override is not None and not -1 <= self.tau_override <= 1:
            raise ConfigurationError("tau_override must lie in [-1, 1]")
        if self.profile_sigma is not None and self.profile_sigma < 0:
            raise ConfigurationError("profile_sigma must be non-negative")
        if self.hbm_budget is not None and self.hbm_budget < 0:
            raise ConfigurationError("hbm_budget must be non-negative")
        if not isinstance(self.cost, dict):
            raise ConfigurationError("cost must be a mapping of cost-model constants")
        known = {f.name for f in dataclasses.fields(CostModel)}
        unknown = set(self.cost) - known
        if unknown:
            raise ConfigurationError(f"unknown cost keys: {sorted(unknown)}")
        try:
            self.cost = CostModel(**{**CostModel().to_dict(), **self.cost}).to_dict()
        except ArgumentError as exc:
            raise ConfigurationError(str(exc)) from exc
        return self

    # -- derived objects ------------------------------------------------------

    @property
    def shape(self) -> ModelShape:
        return ModelShape(self.num_layers, self.num_q_heads, self.num_kv_heads, self.head_dim,
                          self.bytes_per_element)

    def cost_model(self) -> CostModel:
        return CostModel(**self.cost)

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigurationError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **changes})

    def digest(self) -> str:
        """Hash of the settings that influence results (excludes workers and output_dir)."""
        doc = self.to_dict()
        doc.pop("workers")
        doc.pop("output_dir")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _positive_int(cfg, *names) -> None:
    for name in names:
        v = getattr(cfg, name)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConfigurationError(f"{name} must be a positive integer, got {v!r}")


def _finite(cfg, name, lo=None) -> None:
    v = getattr(cfg, name)
    if not _is_number(v) or (lo is not None and v < lo):
        raise ConfigurationError(f"{name} must be a finite number >= {lo}, got {v!r}")
