"""Decode workloads: a seeded synthetic transformer stand-in and recorded traces.

A workload supplies prompt keys/values for every (layer, KV head) and, per
decode step, the true queries, the one-layer-early approximate queries and
the new token's key/value rows.

Synthetic hidden states follow a normalized Gaussian walk over steps; each
layer perturbs its input through a fixed random linear map, so the hidden
state feeding layer ``l-1`` is a close but imperfect proxy for layer ``l``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import ModelShape
from .errors import ConfigurationError, ShapeError

TRACE_MAGIC = b"KVTR"
TRACE_VERSION = 1
_HEADER = struct.Struct("<4sI7I")
_DTYPES = {2: "<f2", 4: "<f4", 8: "<f8"}
# keys/values are held in single precision; all arithmetic upcasts to float64
STORAGE_DTYPE = np.float32


@dataclass
class StepInput:
    q_true: np.ndarray            # (L, h_q, d_k)
    q_approx: np.ndarray          # (L, h_q, d_k); layer 0 mirrors q_true
    new_k: np.ndarray | None      # (L, h_kv, d_k)
    new_v: np.ndarray | None


def _normalize(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norm > 0, norm, 1.0)


def _batched_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Softmax attention for a stack of queries ``(..., d)`` over shared K/V."""
    logits = Q @ K.T / np.sqrt(K.shape[1])
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ V


class SyntheticModel:
    """Random projection weights shared by every sequence drawn from it."""

    def __init__(self, shape: ModelShape, hidden_dim: int = 256, layer_drift: float = 0.1,
                 query_bias: float = 1.0, prompt_sigma: float = 0.003,
                 importance_beta: tuple[float, float] = (1.0, 0.6), seed: int = 0):
        if hidden_dim < 1:
            raise ShapeError("hidden_dim must be positive")
        if layer_drift < 0 or query_bias < 0 or prompt_sigma < 0:
            raise ConfigurationError("drift, bias and prompt_sigma must be non-negative")
        self.shape = shape
        self.hidden_dim = hidden_dim
        self.layer_drift = layer_drift
        self.query_bias = query_bias
        self.prompt_sigma = prompt_sigma
        self.seed = seed
        L, hq, hkv, d = shape.num_layers, shape.num_q_heads, shape.num_kv_heads, shape.head_dim
        rng = np.random.default_rng([seed, 0])
        self.w_q = rng.standard_normal((L, hidden_dim, hq * d))
        self.w_k = rng.standard_normal((L, hidden_dim, hkv * d))
        self.w_v = rng.standard_normal((L, hidden_dim, hkv * d))
        self.layer_maps = rng.standard_normal((L, hidden_dim, hidden_dim)) / np.sqrt(hidden_dim)
        directions = _normalize(rng.standard_normal((L, hq, d))) * np.sqrt(d)
        scales = rng.uniform(0.0, query_bias, size=(L, hq, 1))
        self.q_bias = directions * scales
        a, b = importance_beta
        self.head_alpha = rng.beta(a, b, size=(L, hq))

    def layer_states(self, x: np.ndarray) -> np.ndarray:
        """Hidden state entering every layer, shape ``(..., L, hidden)``."""
        states = [x]
        if self.layer_drift == 0:
            return np.stack(states * self.shape.num_layers, axis=-2)
        for l in range(1, self.shape.num_layers):
            prev = states[-1]
            states.append(_normalize(prev + self.layer_drift * prev @ self.layer_maps[l].T))
        return np.stack(states, axis=-2)

    def project_queries(self, states: np.ndarray) -> np.ndarray:
        """True queries ``(..., L, h_q, d)`` from per-layer hidden states."""
        s = self.shape
        q = np.einsum("...lh,lhq->...lq", states, self.w_q)
        return q.reshape(q.shape[:-1] + (s.num_q_heads, s.head_dim)) + self.q_bias

    def approx_queries(self, states: np.ndarray) -> np.ndarray:
        """Queries for layer ``l`` computed from the state entering layer ``l-1``."""
        s = self.shape
        shifted = np.concatenate([states[..., :1, :], states[..., :-1, :]], axis=-2)
        q = np.einsum("...lh,lhq->...lq", shifted, self.w_q)
        return q.reshape(q.shape[:-1] + (s.num_q_heads, s.head_dim)) + self.q_bias

    def project_kv(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = self.shape
        k = np.einsum("...lh,lhq->...lq", states, self.w_k)
        v = np.einsum("...lh,lhq->...lq", states, self.w_v)
        new = k.shape[:-1] + (s.num_kv_heads, s.head_dim)
        return k.reshape(new), v.reshape(new)

    def walk(self, sigma: float, steps: int, seed, start: np.ndarray | None = None) -> np.ndarray:
        """Normalized Gaussian walk of ``steps + 1`` hidden states."""
        rng = np.random.default_rng(seed)
        x = _normalize(rng.standard_normal(self.hidden_dim)) if start is None else start
        noise = sigma * rng.standard_normal((steps, self.hidden_dim))
        out = np.empty((steps + 1, self.hidden_dim))
        out[0] = x
        for t in range(steps):
            x = _normalize(x + noise[t])
            out[t + 1] = x
        return out

    def query_trace(self, sigma: float, sequences: int, steps: int, seed: int) -> np.ndarray:
        """True queries of independent sequences, ``(S, steps, L, h_q, d)``."""
        walks = np.stack([self.walk(sigma, steps - 1, [seed, 1, s]) for s in range(sequences)])
        return self.project_queries(self.layer_states(walks))

    def sequence(self, sigma: float, n_prompt: int, n_steps: int, seed: int) -> "SyntheticSequence":
        return SyntheticSequence(self, sigma, n_prompt, n_steps, seed)

    def importance_samples(self, sigma: float, n_prompt: int, samples: int, seed: int,
                           sink: int, recent: int, noise: float = 0.0):
        """Full, streaming and blended target outputs per query head.

        Targets mix the two attention outputs with the model's planted
        per-head coefficients, optionally with Gaussian noise.  Returns three
        arrays of shape ``(L, h_q, samples, d)``.
        """
        from .attention import streaming_indices

        seq = self.sequence(sigma, n_prompt, samples - 1, seed)
        K, V = seq.prompt_kv()
        s = self.shape
        window = streaming_indices(n_prompt, sink, recent).indices
        full = np.zeros((s.num_layers, s.num_q_heads, samples, s.head_dim))
        stream = np.zeros_like(full)
        for l in range(s.num_layers):
            for j in range(s.num_kv_heads):
                heads = s.q_heads_of(j)
                Q = seq.queries[:samples, l, heads.start:heads.stop].transpose(1, 0, 2)
                Kf = K[l, j].astype(np.float64)
                Vf = V[l, j].astype(np.float64)
                full[l, heads.start:heads.stop] = _batched_attention(Q, Kf, Vf)
                stream[l, heads.start:heads.stop] = _batched_attention(Q, Kf[window], Vf[window])
        alpha = self.head_alpha[:, :, None, None]
        target = alpha * full + (1 - alpha) * stream
        if noise > 0:
            rng = np.random.default_rng([seed, 2])
            target = target + noise * rng.standard_normal(target.shape)
        return full, stream, target


class SyntheticSequence:
    """One prompt plus a decode walk drawn from a :class:`SyntheticModel`."""

    def __init__(self, model: SyntheticModel, sigma: float, n_prompt: int, n_steps: int, seed: int):
        if n_prompt < 1 or n_steps < 0:
            raise ConfigurationError("n_prompt must be >= 1 and n_steps >= 0")
        if sigma < 0:
            raise ConfigurationError("sigma must be non-negative")
        self.model = model
        self.shape = model.shape
        self.sigma = sigma
        self.n_prompt = n_prompt
        self.n_steps = n_steps
        self.seed = seed
        s = self.shape
        prompt_walk = model.walk(model.prompt_sigma, n_prompt - 1, [seed, 3])
        prompt_states = model.layer_states(prompt_walk)            # (n, L, hidden)
        kv_shape = (s.num_layers, s.num_kv_heads, n_prompt, s.head_dim)
        self._prompt_k = np.empty(kv_shape, dtype=STORAGE_DTYPE)
        self._prompt_v = np.empty(kv_shape, dtype=STORAGE_DTYPE)
        for l in range(s.num_layers):
            x = prompt_states[:, l]
            self._prompt_k[l] = (x @ model.w_k[l]).reshape(n_prompt, s.num_kv_heads, s.head_dim).transpose(1, 0, 2)
            self._prompt_v[l] = (x @ model.w_v[l]).reshape(n_prompt, s.num_kv_heads, s.head_dim).transpose(1, 0, 2)
        del prompt_states
        walk = model.walk(sigma, n_steps, [seed, 4], start=prompt_walk[-1])
        states = model.layer_states(walk)                          # (T+1, L, hidden)
        self.states = states
        self.queries = model.project_queries(states)
        self.approx = model.approx_queries(states)
        new_k, new_v = model.project_kv(states)
        self.new_k = new_k.astype(STORAGE_DTYPE)
        self.new_v = new_v.astype(STORAGE_DTYPE)

    def prompt_kv(self) -> tuple[np.ndarray, np.ndarray]:
        """Prompt keys and values, each ``(L, h_kv, n_prompt, d)``."""
        return self._prompt_k, self._prompt_v

    def step(self, t: int) -> StepInput:
        if not 0 <= t <= self.n_steps:
            raise IndexError(f"step {t} outside [0, {self.n_steps}]")
        if t == 0:
            return StepInput(self.queries[0], self.approx[0], None, None)
        return StepInput(self.queries[t], self.approx[t], self.new_k[t], self.new_v[t])


@dataclass(frozen=True)
class TraceHeader:
    num_layers: int
    num_q_heads: int
    num_kv_heads: int
    head_dim: int
    n_prompt: int
    n_steps: int
    element_width: int

    def shape(self) -> ModelShape:
        return ModelShape(self.num_layers, self.num_q_heads, self.num_kv_heads, self.head_dim,
                          bytes_per_element=self.element_width)

    def as_dict(self) -> dict:
        return {"L": self.num_layers, "h_q": self.num_q_heads, "h_kv": self.num_kv_heads,
                "d_k": self.head_dim, "n_prompt": self.n_prompt, "n_steps": self.n_steps,
                "element_width": self.element_width}


def write_trace(workload, path, element_width: int = 4) -> TraceHeader:
    """Record a workload as a binary trace with a JSON sidecar.

    Layout after the header: prompt keys, prompt values, then for each step
    ``t = 0..n_steps`` the true and approximate queries, followed (for
    ``t >= 1``) by the new key and value rows.  All blocks are row-major
    little-endian floats of ``element_width`` bytes.
    """
    if element_width not in _DTYPES:
        raise ConfigurationError(f"element_width must be one of {sorted(_DTYPES)}")
    s = workload.shape
    hdr = TraceHeader(s.num_layers, s.num_q_heads, s.num_kv_heads, s.head_dim,
                      workload.n_prompt, workload.n_steps, element_width)
    dt = np.dtype(_DTYPES[element_width])
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TRACE_MAGIC, TRACE_VERSION, *hdr.as_dict().values()))
        K, V = workload.prompt_kv()
        fh.write(np.ascontiguousarray(K, dtype=dt).tobytes())
        fh.write(np.ascontiguousarray(V, dtype=dt).tobytes())
        for t in range(workload.n_steps + 1):
            step = workload.step(t)
            fh.write(np.ascontiguousarray(step.q_true, dtype=dt).tobytes())
            fh.write(np.ascontiguousarray(step.q_approx, dtype=dt).tobytes())
            if t >= 1:
                fh.write(np.ascontiguousarray(step.new_k, dtype=dt).tobytes())
                fh.write(np.ascontiguousarray(step.new_v, dtype=dt).tobytes())
    sidecar = dict(hdr.as_dict(), format="kvoffload-trace", version=TRACE_VERSION)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return hdr


class TraceWorkload:
    """Replays a recorded trace file."""

    def __init__(self, path):
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise ConfigurationError(f"cannot read trace {path}: {exc}") from exc
        if len(raw) < _HEADER.size:
            raise ConfigurationError("trace file is too short")
        magic, version, *vals = _HEADER.unpack_from(raw, 0)
        if magic != TRACE_MAGIC or version != TRACE_VERSION:
            raise ConfigurationError("not a kvoffload trace (bad magic or version)")
        self.header = TraceHeader(*vals)
        h = self.header
        if h.element_width not in _DTYPES:
            raise ConfigurationError(f"unsupported element width {h.element_width}")
        self.shape = h.shape()
        self.n_prompt = h.n_prompt
        self.n_steps = h.n_steps
        dt = np.dtype(_DTYPES[h.element_width])
        L, hq, hkv, d, n = h.num_layers, h.num_q_heads, h.num_kv_heads, h.head_dim, h.n_prompt
        offset = _HEADER.size

        def take(shape):
            nonlocal offset
            count = int(np.prod(shape))
            if offset + count * dt.itemsize > len(raw):
                raise ConfigurationError("trace file is truncated")
            arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).astype(np.float64)
            if h.element_width <= 4:
                arr = arr.astype(STORAGE_DTYPE)
            offset += count * dt.itemsize
            return arr.reshape(shape)

        self._k = take((L, hkv, n, d))
        self._v = take((L, hkv, n, d))
        self._steps = []
        for t in range(h.n_steps + 1):
            q = take((L, hq, d))
            qa = take((L, hq, d))
            if t >= 1:
                self._steps.append(StepInput(q, qa, take((L, hkv, d)), take((L, hkv, d))))
            else:
                self._steps.append(StepInput(q, qa, None, None))
        if offset != len(raw):
            raise ConfigurationError("trace file has trailing bytes")

    def prompt_kv(self):
        return self._k, self._v

    def step(self, t: int) -> StepInput:
        return self._steps[t]

    def query_trace(self) -> np.ndarray:
        """True queries of the single recorded sequence, ``(1, T+1, L, h_q, d)``."""
        return np.stack([s.q_true for s in self._steps])[None]
