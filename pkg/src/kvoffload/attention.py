"""Dense single-query attention kernels used by the decode simulator.

All arithmetic is carried out in float64 regardless of the modeled storage
width; ``ModelShape.bytes_per_element`` only feeds byte accounting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, IndexOutOfRange, NumericError, ShapeError

DEFAULT_SINK = 4
DEFAULT_RECENT = 64


@dataclass(frozen=True)
class ModelShape:
    num_layers: int
    num_q_heads: int
    num_kv_heads: int
    head_dim: int = 128
    bytes_per_element: int = 2

    def __post_init__(self):
        for name in ("num_layers", "num_q_heads", "num_kv_heads", "head_dim", "bytes_per_element"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ShapeError(f"{name} must be a positive integer, got {value!r}")
        if self.num_q_heads % self.num_kv_heads:
            raise ShapeError(
                f"num_q_heads={self.num_q_heads} is not a multiple of num_kv_heads={self.num_kv_heads}"
            )

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads

    def q_heads_of(self, kv_head: int) -> range:
        m = self.group_size
        return range(kv_head * m, (kv_head + 1) * m)

    def kv_head_of(self, q_head: int) -> int:
        return q_head // self.group_size

    def row_bytes(self) -> int:
        """Bytes of one key (or value) row at the modeled storage width."""
        return self.head_dim * self.bytes_per_element


@dataclass(frozen=True)
class WindowInfo:
    indices: np.ndarray
    clamped: bool


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (tokens x head_dim), got shape {arr.shape}")
    return arr


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def _check_qkv(q, K, V) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q = _as_vector(q, "q")
    K = _as_matrix(K, "K")
    V = _as_matrix(V, "V")
    if K.shape[0] != V.shape[0]:
        raise ShapeError(f"K has {K.shape[0]} rows but V has {V.shape[0]}")
    if K.shape[0] < 1:
        raise ShapeError("attention needs at least one key row")
    if K.shape[1] != q.shape[0]:
        raise ShapeError(f"query length {q.shape[0]} != key width {K.shape[1]}")
    for name, arr in (("q", q), ("K", K), ("V", V)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{name} contains non-finite values")
    return q, K, V


def attention_weights(q, K) -> np.ndarray:
    """Softmax of the scaled dot-product scores, max-subtracted for stability."""
    q = _as_vector(q, "q")
    K = _as_matrix(K, "K")
    scores = K @ q / math.sqrt(q.shape[0])
    scores -= scores.max()
    w = np.exp(scores)
    return w / w.sum()


def full_attention(q, K, V) -> np.ndarray:
    q, K, V = _check_qkv(q, K, V)
    return attention_weights(q, K) @ V


def topk_select_exact(q, K, k: int) -> np.ndarray:
    """Indices of the ``k`` largest ``q . K_j``, sorted ascending.

    Ties go to the lower index.
    """
    q = _as_vector(q, "q")
    K = _as_matrix(K, "K")
    n = K.shape[0]
    if not 1 <= k <= n:
        raise ArgumentError(f"k must satisfy 1 <= k <= n={n}, got {k}")
    scores = K @ q
    return select_top(scores, k)


def select_top(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` positions of a score vector with lowest-index tie-breaking."""
    scores = np.asarray(scores)
    n = scores.shape[0]
    if k >= n:
        return np.arange(n)
    # k-th largest value; everything above it is in, ties fill by position
    kth = np.partition(scores, n - k)[n - k]
    above = np.flatnonzero(scores > kth)
    ties = np.flatnonzero(scores == kth)[: k - above.size]
    return np.sort(np.concatenate([above, ties]))


def _check_indices(indices, n: int) -> np.ndarray:
    idx = np.asarray(indices)
    if idx.ndim != 1 or idx.size == 0:
        raise ArgumentError("indices must be a non-empty 1-D sequence")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ArgumentError(f"indices must be integers, got dtype {idx.dtype}")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexOutOfRange(f"index out of range for sequence of length {n}")
    if np.unique(idx).size != idx.size:
        raise ArgumentError("indices contain duplicates")
    return idx


def topk_attention(q, K, V, indices) -> np.ndarray:
    """Gather the selected rows and attend over them only."""
    q, K, V = _check_qkv(q, K, V)
    idx = _check_indices(indices, K.shape[0])
    return attention_weights(q, K[idx]) @ V[idx]


def streaming_indices(n: int, sink_count: int = DEFAULT_SINK, recent_count: int = DEFAULT_RECENT) -> WindowInfo:
    """Union of the sink prefix and the recent suffix of a length-``n`` sequence."""
    if sink_count < 0 or recent_count < 0:
        raise ArgumentError("sink_count and recent_count must be non-negative")
    if n < 1:
        raise ShapeError("sequence must contain at least one token")
    clamped = sink_count + recent_count > n
    sink = np.arange(min(sink_count, n))
    recent = np.arange(max(n - recent_count, 0), n)
    idx = np.union1d(sink, recent).astype(np.int64)
    return WindowInfo(indices=idx, clamped=bool(clamped))


def streaming_attention(q, K, V, sink_count: int = DEFAULT_SINK, recent_count: int = DEFAULT_RECENT,
                        *, return_info: bool = False):
    q, K, V = _check_qkv(q, K, V)
    info = streaming_indices(K.shape[0], sink_count, recent_count)
    if info.indices.size == 0:
        raise ArgumentError("streaming window is empty (sink_count = recent_count = 0)")
    out = attention_weights(q, K[info.indices]) @ V[info.indices]
    if return_info:
        return out, info
    return out


def blended_attention(q, K, V, alpha: float, sink_count: int = DEFAULT_SINK,
                      recent_count: int = DEFAULT_RECENT) -> np.ndarray:
    """``alpha * full + (1 - alpha) * streaming`` for one query head."""
    if not 0.0 <= alpha <= 1.0:
        raise ArgumentError(f"alpha must lie in [0, 1], got {alpha}")
    full = full_attention(q, K, V)
    stream = streaming_attention(q, K, V, sink_count, recent_count)
    if alpha == 1.0:
        return full
    if alpha == 0.0:
        return stream
    return alpha * full + (1.0 - alpha) * stream


def cosine_similarity(a, b, *, return_flag: bool = False):
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    A zero vector on either side gives 0.0; with ``return_flag`` the second
    element of the returned tuple reports that degenerate case.
    """
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"vector lengths differ: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return (0.0, True) if return_flag else 0.0
    sim = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return (sim, False) if return_flag else sim


def cosine_rows(A, B) -> np.ndarray:
    """Row-wise cosine similarity of two equally shaped matrices; zero rows give 0."""
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    if A.shape != B.shape:
        raise ShapeError(f"shape mismatch {A.shape} vs {B.shape}")
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    denom = na * nb
    dots = np.einsum("ij,ij->i", A, B)
    out = np.zeros(A.shape[0])
    ok = denom > 0
    out[ok] = np.clip(dots[ok] / denom[ok], -1.0, 1.0)
    return out


def topk_overlap_ratio(a, b, k: int) -> float:
    """|a ∩ b| / k for two top-k index sets."""
    return np.intersect1d(a, b).size / k
