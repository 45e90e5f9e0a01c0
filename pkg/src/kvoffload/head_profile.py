"""Per-head reuse thresholds, importance fitting and offload placement."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ConfigurationError, ShapeError

DEFAULT_ETA = 0.8
DEFAULT_P = 3.0
DEFAULT_EPSILON = 0.1

OFFLOADED = "offloaded"
PERSISTENT = "persistent"


def compute_threshold(s_i: float, eta: float = DEFAULT_ETA, p: float = DEFAULT_P) -> float:
    """Reuse threshold of a head with importance ``s_i``.

    The angle bound ``arccos(eta)`` is interpolated towards ``pi`` with
    weight ``s_i ** p``; unimportant heads end up with threshold -1.
    """
    if not 0.0 <= s_i <= 1.0:
        raise ArgumentError(f"importance must lie in [0, 1], got {s_i}")
    if not -1.0 < eta <= 1.0:
        raise ArgumentError(f"eta must lie in (-1, 1], got {eta}")
    if p < 1:
        raise ArgumentError(f"p must be >= 1, got {p}")
    lam = s_i ** p
    if lam == 1.0:
        return float(eta)
    theta = lam * math.acos(eta) + (1.0 - lam) * math.pi
    return math.cos(theta)


def compute_difficulty(tau: float, s_hat: float, epsilon: float = DEFAULT_EPSILON) -> float:
    if epsilon <= 0:
        raise ArgumentError(f"epsilon must be positive, got {epsilon}")
    return tau - (s_hat - epsilon)


@dataclass(frozen=True)
class FitResult:
    alpha: np.ndarray
    degenerate: np.ndarray


def fit_importance(full_outputs, streaming_outputs, target_outputs) -> FitResult:
    """Least-squares mixing weight between full and streaming attention.

    Inputs are arrays of shape ``(heads, samples, head_dim)``; for each head
    the 1-D least-squares solution is projected onto [0, 1].  Heads whose
    full and streaming outputs coincide everywhere get 0 and a flag.
    """
    F = np.asarray(full_outputs, dtype=np.float64)
    S = np.asarray(streaming_outputs, dtype=np.float64)
    T = np.asarray(target_outputs, dtype=np.float64)
    if not (F.shape == S.shape == T.shape) or F.ndim != 3:
        raise ShapeError("outputs must share a (heads, samples, head_dim) shape")
    if F.shape[1] < 1:
        raise ShapeError("need at least one sample per head")
    D = (F - S).reshape(F.shape[0], -1)
    R = (T - S).reshape(F.shape[0], -1)
    denom = np.einsum("ij,ij->i", D, D)
    num = np.einsum("ij,ij->i", D, R)
    degenerate = denom == 0.0
    alpha = np.zeros(F.shape[0])
    ok = ~degenerate
    alpha[ok] = np.clip(num[ok] / denom[ok], 0.0, 1.0)
    return FitResult(alpha=alpha, degenerate=degenerate)


def profile_similarity(query_trace) -> np.ndarray:
    """Mean adjacent-step cosine per query head.

    ``query_trace`` has shape ``(sequences, steps, heads, head_dim)`` (a
    3-D array is read as a single sequence).  Returns one value per head.
    """
    Q = np.asarray(query_trace, dtype=np.float64)
    if Q.ndim == 3:
        Q = Q[None]
    if Q.ndim != 4:
        raise ShapeError("query trace must be (sequences, steps, heads, head_dim)")
    if Q.shape[1] < 2:
        raise ArgumentError("profiling needs at least two steps per sequence")
    a = Q[:, :-1]
    b = Q[:, 1:]
    dots = np.einsum("stjd,stjd->stj", a, b)
    norms = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    cos = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
    return np.clip(cos, -1.0, 1.0).mean(axis=(0, 1))


def kv_reduce(per_q_head, group_size: int, how: str) -> np.ndarray:
    """Reduce per-query-head values to KV heads with ``max`` or ``min``."""
    v = np.asarray(per_q_head, dtype=np.float64)
    if v.shape[-1] % group_size:
        raise ShapeError("query-head axis is not a multiple of the group size")
    grouped = v.reshape(v.shape[:-1] + (v.shape[-1] // group_size, group_size))
    return grouped.max(axis=-1) if how == "max" else grouped.min(axis=-1)


@dataclass
class HeadRecord:
    q_importance: list[float]
    kv_importance: float
    s_hat: float
    tau: float
    D: float
    placement: str = OFFLOADED


@dataclass
class ModelProfile:
    """Per-layer list of per-KV-head records plus the hyper-parameters used."""

    layers: list[list[HeadRecord]]
    eta: float = DEFAULT_ETA
    p: float = DEFAULT_P
    epsilon: float = DEFAULT_EPSILON

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_kv_heads(self) -> int:
        return len(self.layers[0])

    def taus(self) -> np.ndarray:
        return np.array([[r.tau for r in layer] for layer in self.layers])

    def difficulties(self) -> np.ndarray:
        return np.array([[r.D for r in layer] for layer in self.layers])

    def q_importance(self) -> np.ndarray:
        return np.array([[w for r in layer for w in r.q_importance] for layer in self.layers])

    def to_json(self) -> str:
        doc = {
            "eta": self.eta,
            "p": self.p,
            "epsilon": self.epsilon,
            "layers": [[asdict(r) for r in layer] for layer in self.layers],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ModelProfile":
        doc = json.loads(text)
        if isinstance(doc, list):
            doc = {"layers": doc}
        layers = [[HeadRecord(**r) for r in layer] for layer in doc["layers"]]
        kw = {k: doc[k] for k in ("eta", "p", "epsilon") if k in doc}
        return cls(layers=layers, **kw)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ModelProfile":
        return cls.from_json(Path(path).read_text())


def build_profile(q_importance, q_s_hat, group_size: int, eta: float = DEFAULT_ETA,
                  p: float = DEFAULT_P, epsilon: float = DEFAULT_EPSILON) -> ModelProfile:
    """Assemble KV-head records from ``(layers, q_heads)`` importance and similarity.

    A KV head takes the largest importance and the smallest similarity of its
    query heads; both choices lean towards protecting accuracy.
    """
    imp = np.asarray(q_importance, dtype=np.float64)
    sim = np.asarray(q_s_hat, dtype=np.float64)
    if imp.shape != sim.shape or imp.ndim != 2:
        raise ShapeError("importance and similarity must both be (layers, q_heads)")
    if np.any(imp < 0) or np.any(imp > 1):
        raise ArgumentError("importance scores must lie in [0, 1]")
    kv_imp = kv_reduce(imp, group_size, "max")
    kv_sim = kv_reduce(sim, group_size, "min")
    layers = []
    for l in range(imp.shape[0]):
        records = []
        for j in range(kv_imp.shape[1]):
            tau = compute_threshold(float(kv_imp[l, j]), eta, p)
            s_hat = float(kv_sim[l, j])
            records.append(HeadRecord(
                q_importance=[float(x) for x in imp[l, j * group_size:(j + 1) * group_size]],
                kv_importance=float(kv_imp[l, j]),
                s_hat=s_hat,
                tau=tau,
                D=compute_difficulty(tau, s_hat, epsilon),
            ))
        layers.append(records)
    return ModelProfile(layers=layers, eta=eta, p=p, epsilon=epsilon)


@dataclass
class LayerPartition:
    layer: int
    n_difficult: int
    n_prefetchable: int
    n_persist: int
    persistent: list[int]


@dataclass
class PartitionPlan:
    layers: list[LayerPartition]
    hbm_budget: float | None
    persistent_bytes: int
    shortfall_heads: list[tuple[int, int]] = field(default_factory=list)

    def is_persistent(self, layer: int, kv_head: int) -> bool:
        return kv_head in self.layers[layer].persistent

    def placement(self, num_kv_heads: int) -> list[list[str]]:
        return [
            [PERSISTENT if h in lp.persistent else OFFLOADED for h in range(num_kv_heads)]
            for lp in self.layers
        ]

    def to_json(self) -> str:
        doc = {
            "hbm_budget": self.hbm_budget,
            "persistent_bytes": self.persistent_bytes,
            "shortfall_heads": [list(x) for x in self.shortfall_heads],
            "layers": [asdict(lp) for lp in self.layers],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        doc = json.loads(text)
        return cls(
            layers=[LayerPartition(**lp) for lp in doc["layers"]],
            hbm_budget=doc["hbm_budget"],
            persistent_bytes=doc["persistent_bytes"],
            shortfall_heads=[tuple(x) for x in doc.get("shortfall_heads", [])],
        )

    def table(self) -> str:
        lines = [f"{'layer':>5} {'N_d':>4} {'N_p':>4} {'N_persist':>9}  persistent"]
        for lp in self.layers:
            lines.append(f"{lp.layer:>5} {lp.n_difficult:>4} {lp.n_prefetchable:>4} "
                         f"{lp.n_persist:>9}  {lp.persistent}")
        return "\n".join(lines)


def prefetchable_heads(t_comp: float, pcie_bw: float, mem_head: float) -> int:
    """Heads whose top-k transfer fits inside one layer's compute window."""
    if t_comp <= 0 or pcie_bw <= 0 or mem_head <= 0:
        raise ArgumentError("t_comp, pcie_bw and mem_head must be positive")
    # small relative slack so exact multiples are not lost to rounding
    return int(math.floor(t_comp * pcie_bw / mem_head * (1 + 1e-12)))


def plan_partition(profile: ModelProfile, t_comp: float, pcie_bw: float, mem_head: float,
                   hbm_budget: float | None = None, head_bytes: float = 0.0) -> PartitionPlan:
    """Choose which KV heads keep their full cache in device memory.

    ``head_bytes`` is the full-sequence KV footprint of one head; it is only
    needed when ``hbm_budget`` is set.
    """
    n_p = prefetchable_heads(t_comp, pcie_bw, mem_head)
    D = profile.difficulties()
    n_layers, n_heads = D.shape
    layers = []
    for l in range(n_layers):
        n_d = int(np.count_nonzero(D[l] > 0))
        n_persist = max(n_d - n_p, 0)
        if l == 0:
            chosen = list(range(n_heads))
        else:
            order = sorted(range(n_heads), key=lambda h: (-D[l, h], h))
            chosen = sorted(order[:n_persist])
        layers.append(LayerPartition(l, n_d, n_p, n_persist, chosen))

    shortfall: list[tuple[int, int]] = []
    if hbm_budget is not None:
        layer0 = n_heads * head_bytes
        if layer0 > hbm_budget:
            raise ConfigurationError(
                f"HBM budget {hbm_budget:g} B cannot hold layer 0 ({layer0:g} B)")
        total = sum(len(lp.persistent) for lp in layers) * head_bytes
        if total > hbm_budget:
            candidates = sorted(
                ((D[lp.layer, h], lp.layer, h) for lp in layers[1:] for h in lp.persistent),
                key=lambda x: (x[0], -x[1], -x[2]),
            )
            for _, l, h in candidates:
                if total <= hbm_budget:
                    break
                layers[l].persistent.remove(h)
                shortfall.append((l, h))
                total -= head_bytes
    persistent_bytes = int(sum(len(lp.persistent) for lp in layers) * head_bytes)
    return PartitionPlan(layers, hbm_budget, persistent_bytes, shortfall)


def apply_placement(profile: ModelProfile, plan: PartitionPlan) -> ModelProfile:
    for l, layer in enumerate(profile.layers):
        for h, rec in enumerate(layer):
            rec.placement = PERSISTENT if plan.is_persistent(l, h) else OFFLOADED
    return profile
