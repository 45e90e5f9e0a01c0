"""Top-k retrieval metadata: an exact scorer and a random-hyperplane sign hash.

The sign-hash retriever stores one bit per (key, hyperplane) pair, packed
eight to a byte, and ranks keys by Hamming affinity with the hashed query,
i.e. ``B - hamming``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ._rows import append_row
from .attention import select_top
from .errors import ArgumentError, ShapeError

DEFAULT_HASH_BITS = 256
EXACT_REFERENCE_BYTES = 8


class Variant(str, enum.Enum):
    EXACT = "exact"
    SIGNHASH = "signhash"


def hash_projection(head_dim: int, hash_bits: int, seed) -> np.ndarray:
    """The ``hash_bits x head_dim`` standard-normal hyperplane matrix for ``seed``."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((hash_bits, head_dim))


def sign_bits(P: np.ndarray, X: np.ndarray) -> np.ndarray:
    # sign(0) is mapped to the positive side so every row hashes deterministically
    return (np.atleast_2d(X) @ P.T) >= 0.0


def pack_bits(bits: np.ndarray) -> np.ndarray:
    return np.packbits(bits, axis=-1)


if hasattr(np, "bitwise_count"):
    def _popcount_rows(x: np.ndarray) -> np.ndarray:
        return np.bitwise_count(x).sum(axis=1, dtype=np.int64)
else:  # numpy < 2.0
    _POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)

    def _popcount_rows(x: np.ndarray) -> np.ndarray:
        return _POPCOUNT[x].sum(axis=1)


@dataclass
class RetrievalMetadata:
    variant: Variant
    keys: np.ndarray | None = None
    bits: np.ndarray | None = None
    projection: np.ndarray | None = None
    seed: object = None
    _rows: int = field(default=0, repr=False)

    @property
    def num_rows(self) -> int:
        return self._rows

    @property
    def hash_bits(self) -> int:
        return 0 if self.projection is None else self.projection.shape[0]

    @property
    def metadata_bytes(self) -> int:
        if self.variant is Variant.EXACT:
            return EXACT_REFERENCE_BYTES
        return self._rows * ((self.hash_bits + 7) // 8)


def encode(K, variant: Variant | str = Variant.SIGNHASH, seed=0,
           hash_bits: int = DEFAULT_HASH_BITS) -> RetrievalMetadata:
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] < 1:
        raise ShapeError(f"K must be a non-empty 2-D matrix, got shape {K.shape}")
    variant = Variant(variant)
    if variant is Variant.EXACT:
        # the exact retriever scans the key store itself; nothing new is stored
        return RetrievalMetadata(variant, keys=K, seed=seed, _rows=K.shape[0])
    if hash_bits < 1:
        raise ArgumentError("hash_bits must be positive")
    P = hash_projection(K.shape[1], hash_bits, seed)
    return RetrievalMetadata(variant, bits=pack_bits(sign_bits(P, K)), projection=P, seed=seed,
                             _rows=K.shape[0])


def scores(q, metadata: RetrievalMetadata) -> np.ndarray:
    """Per-key retrieval scores (dot products, or Hamming affinities).

    ``q`` may be one query ``(d,)`` or a stack ``(m, d)``; the result has
    shape ``(n,)`` or ``(m, n)`` accordingly.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    Q = np.atleast_2d(q)
    if metadata.variant is Variant.EXACT:
        out = exact_scores(Q, metadata.keys[: metadata.num_rows])
    else:
        qbits = pack_bits(sign_bits(metadata.projection, Q))
        bits = metadata.bits[: metadata.num_rows]
        out = np.stack([metadata.hash_bits - _popcount_rows(np.bitwise_xor(bits, row)) for row in qbits])
        out = out.astype(np.float64)
    return out[0] if single else out


def exact_scores(Q: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """``Q @ keys.T``; the single place exact dot-product scores are formed."""
    return Q @ keys.T


def retrieve(q, metadata: RetrievalMetadata, k: int) -> np.ndarray:
    n = metadata.num_rows
    if not 1 <= k <= n:
        raise ArgumentError(f"k must satisfy 1 <= k <= n={n}, got {k}")
    return select_top(scores(q, metadata), k)


def update_metadata(metadata: RetrievalMetadata, new_key_row, keys=None) -> RetrievalMetadata:
    """Append one decoded token's key in place and return the metadata.

    For the exact variant ``keys`` may name the (already extended) key store
    the metadata should reference; otherwise the row goes into its own buffer.
    """
    row = np.asarray(new_key_row, dtype=np.float64).reshape(1, -1)
    if metadata.variant is Variant.EXACT:
        if keys is not None:
            metadata.keys = keys
        else:
            metadata.keys = append_row(metadata.keys, metadata.num_rows, row[0])
        metadata._rows += 1
        return metadata
    if row.shape[1] != metadata.projection.shape[1]:
        raise ShapeError("new key width does not match the hash projection")
    metadata.bits = append_row(metadata.bits, metadata.num_rows,
                               pack_bits(sign_bits(metadata.projection, row))[0])
    metadata._rows += 1
    return metadata
