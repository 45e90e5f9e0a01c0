"""Acceptance suite: one test per criterion, each with its runtime bound.

Every test prints a single PASS/FAIL line; the lines are repeated in the
terminal summary so they survive output capture.
"""

import json
import math
import time
from contextlib import contextmanager

import mpmath
import numpy as np
from scipy.stats import spearmanr

from kvoffload import retrieval
from kvoffload.attention import (
    ModelShape,
    blended_attention,
    full_attention,
    streaming_attention,
    streaming_indices,
    topk_attention,
    topk_select_exact,
)
from kvoffload.baselines import BlockCacheState, Policy
from kvoffload.cli import main
from kvoffload.config import RunConfig
from kvoffload.engine import DecodeEngine, EngineConfig
from kvoffload.experiment import plan_for, profile_for, run_experiment
from kvoffload.head_profile import (
    LayerPartition,
    PartitionPlan,
    apply_placement,
    build_profile,
    compute_threshold,
    fit_importance,
)
from kvoffload.pipeline import CostModel, LayerPlan, schedule_layer, transfer_time
from kvoffload.similarity_cache import aggregate_similarity
from kvoffload.workload import SyntheticModel

from test_baselines import BS, RefCache, exhaustive_check, impl_access, impl_canon

RESULTS: list[str] = []

SWEEP = [0.005, 0.01, 0.02, 0.05, 0.1, 0.2]


@contextmanager
def criterion(num: int, title: str, bound_s: float):
    start = time.perf_counter()
    status, note = "FAIL", ""
    try:
        yield
        elapsed = time.perf_counter() - start
        if elapsed >= bound_s:
            note = f"runtime {elapsed:.2f}s exceeds bound"
            raise AssertionError(note)
        status = "PASS"
    except BaseException as exc:
        note = note or f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        raise
    finally:
        elapsed = time.perf_counter() - start
        line = f"criterion {num:2d} {status}  {title}  [{elapsed:.2f}s, bound {bound_s:g}s]"
        if note:
            line += f"  ({note})"
        RESULTS.append(line)
        print(line)


def test_01_threshold_math():
    with criterion(1, "threshold endpoints and high-precision midpoint", 1.0):
        assert abs(compute_threshold(1.0, 0.8, 3) - 0.8) <= 1e-12
        assert abs(compute_threshold(0.0, 0.8, 3) - (-1.0)) <= 1e-12
        with mpmath.workdps(50):
            lam = mpmath.mpf("0.5") ** 3
            ref = mpmath.cos(lam * mpmath.acos(mpmath.mpf("0.8")) + (1 - lam) * mpmath.pi)
        assert abs(compute_threshold(0.5, 0.8, 3) - float(ref)) <= 1e-9


def test_02_aggregation_identity():
    with criterion(2, "aggregation identity and per-member monotonicity", 5.0):
        r = np.random.default_rng(2024)
        for _ in range(10_000):
            m = int(r.integers(1, 9))
            w = r.uniform(0.0, 5.0, m)
            s = float(r.uniform(1e-3, 1.0))
            assert abs(aggregate_similarity([s] * m, w) - s) <= 1e-12
        grid = np.linspace(0.05, 1.0, 20)
        for _ in range(100):
            m = int(r.integers(2, 6))
            w = r.uniform(0.01, 5.0, m)
            sims = r.uniform(0.05, 1.0, m)
            for l in range(m):
                prev = -np.inf
                for g in grid:
                    sims[l] = g
                    cur = aggregate_similarity(sims, w)
                    assert cur >= prev
                    prev = cur


def test_03_scale_invariance():
    with criterion(3, "exact and hashed retrieval invariant to query scaling", 5.0):
        for i in range(1000):
            r = np.random.default_rng([3, i])
            K = r.standard_normal((128, 32))
            q = r.standard_normal(32)
            np.testing.assert_array_equal(topk_select_exact(q, K, 12), topk_select_exact(3.7 * q, K, 12))
            md = retrieval.encode(K, "signhash", seed=i, hash_bits=256)
            np.testing.assert_array_equal(retrieval.retrieve(q, md, 12), retrieval.retrieve(3.7 * q, md, 12))


def test_04_oracle_equivalence():
    with criterion(4, "always-miss exact engine equals standalone top-k oracle", 30.0):
        shape = ModelShape(4, 2, 2, 32, 2)
        n, steps, sink, recent = 512, 200, 4, 64
        model = SyntheticModel(shape, hidden_dim=64, layer_drift=0.0, seed=7)
        wl = model.sequence(0.05, n, steps, seed=7)
        imp = np.ones((4, 2))
        profile = build_profile(imp, np.full_like(imp, 0.9), 1)
        plan = PartitionPlan([LayerPartition(0, 0, 0, 2, [0, 1])]
                             + [LayerPartition(l, 0, 0, 0, []) for l in range(1, 4)], None, 0, [])
        eng = DecodeEngine(wl, profile, plan, EngineConfig(mode="always_miss", retriever="exact",
                                                           sink_count=sink, recent_count=recent,
                                                           compute_oracle=False))
        eng.prefill()
        K, V = wl.prompt_kv()
        keys = np.zeros((4, 2, n + steps, 32))
        vals = np.zeros_like(keys)
        keys[:, :, :n], vals[:, :, :n] = K, V
        worst = 0.0
        for t in range(1, steps + 1):
            inp = wl.step(t)
            visible = n + t - 1
            keys[:, :, visible], vals[:, :, visible] = inp.new_k, inp.new_v
            out = eng.decode_step().outputs
            window = streaming_indices(visible + 1, sink, recent).indices
            ref = np.zeros_like(out)
            for l in range(4):
                for h in range(2):
                    q = inp.q_true[l, h]
                    idx = np.union1d(topk_select_exact(q, keys[l, h, :visible], eng.k), window)
                    ref[l, h] = topk_attention(q, keys[l, h, :visible + 1], vals[l, h, :visible + 1], idx)
            worst = max(worst, np.linalg.norm(out - ref) / np.linalg.norm(ref))
        assert worst <= 1e-5, worst


def test_05_blended_endpoints_and_fit():
    with criterion(5, "blended attention endpoints and importance recovery", 10.0):
        r = np.random.default_rng(5)
        for _ in range(50):
            q, K, V = r.standard_normal(16), r.standard_normal((300, 16)), r.standard_normal((300, 16))
            np.testing.assert_array_equal(blended_attention(q, K, V, 1.0), full_attention(q, K, V))
            np.testing.assert_array_equal(blended_attention(q, K, V, 0.0), streaming_attention(q, K, V))
        alpha = np.arange(1, 10) / 10
        F = r.standard_normal((9, 40, 32))
        S = r.standard_normal((9, 40, 32))
        T = alpha[:, None, None] * F + (1 - alpha[:, None, None]) * S
        np.testing.assert_allclose(fit_importance(F, S, T).alpha, alpha, atol=1e-6, rtol=0)


def test_06_similarity_predicts_overlap():
    with criterion(6, "adjacent-query cosine rank-correlates with top-k overlap", 60.0):
        shape = ModelShape(2, 8, 4, 128, 2)
        n, steps = 2048, 8
        k = math.ceil(0.10 * n)
        model = SyntheticModel(shape, seed=0)
        cos_all, overlap_all = [], []
        for sigma in SWEEP:
            for s in range(30):
                seq = model.sequence(sigma, n, steps, seed=s)
                K, _ = seq.prompt_kv()
                Q = seq.queries                                        # (T+1, L, h_q, d)
                Kq = np.repeat(K, shape.group_size, axis=1).astype(np.float64)
                scores = np.einsum("tlhd,lhnd->lhtn", Q, Kq)
                top = np.argpartition(-scores, k - 1, axis=-1)[..., :k]
                mask = np.zeros(scores.shape, dtype=bool)
                np.put_along_axis(mask, top, True, axis=-1)
                overlap = (mask[:, :, :-1] & mask[:, :, 1:]).sum(-1) / k
                Qn = Q / np.linalg.norm(Q, axis=-1, keepdims=True)
                cos = (Qn[:-1] * Qn[1:]).sum(-1).transpose(1, 2, 0)
                cos_all.append(cos.ravel())
                overlap_all.append(overlap.ravel())
        rho = spearmanr(np.concatenate(cos_all), np.concatenate(overlap_all)).statistic
        print(f"spearman={rho:.4f}")
        assert rho >= 0.8, rho


def test_07_hit_ratio_monotone_and_band():
    with criterion(7, "hit ratio endpoints, sigma monotonicity and default band", 60.0):
        base = dict(n_prompt=2048, compute_oracle=False, profile_sigma=0.03)
        always = run_experiment(RunConfig(**base, tau_override=-1.0))
        assert always.rows[0]["hit_ratio"] == 1.0
        sweep = run_experiment(RunConfig(**base, sigmas=SWEEP, seeds=[0, 1, 2]))
        means = [np.mean([r["hit_ratio"] for r in sweep.rows if r["sigma"] == s]) for s in SWEEP]
        print("sweep hit ratios:", [round(float(m), 4) for m in means])
        assert all(a > b for a, b in zip(means, means[1:])), means
        default = run_experiment(RunConfig(compute_oracle=False)).rows[0]["hit_ratio"]
        print(f"default hit ratio={default:.4f}")
        assert 0.5 <= default <= 0.95, default


def test_08_transfer_model():
    with criterion(8, "transfer time, hidden-transfer clamp and bubble additivity", 1.0):
        cost = CostModel(pcie_peak_bw=16 * 2 ** 30)
        t = transfer_time(4 * 2 ** 20, "zero_copy", cost)
        assert t == 2 ** -12 and abs(t * 1e6 - 244.140625) < 1e-9
        cases = 0
        for nbytes in (0, 10_000, 1_000_000, 5_000_000, 40_000_000):
            for window in (0.0, 1e-5, 1e-4, 1e-3):
                for events in (0, 1, 2, 3, 7):
                    c = CostModel(pcie_peak_bw=2e10, t_comp=window, sync_bubble_cpu_centric=3e-5)
                    plan = LayerPlan(1, miss_bytes=nbytes, mgmt_time=2e-6, n_sync_events=events)
                    x = nbytes / 2e10
                    tl = schedule_layer(plan, c, "cpu_centric", True, "zero_copy")
                    assert math.isclose(tl.transfer, max(0.0, x - window), abs_tol=1e-15)
                    assert math.isclose(tl.hidden, min(x, window), abs_tol=1e-15)
                    assert math.isclose(tl.sync, events * 3e-5, abs_tol=1e-15)
                    assert math.isclose(tl.total, window + max(0.0, x - window) + 2e-6 + events * 3e-5,
                                        rel_tol=1e-12, abs_tol=1e-15)
                    cases += 1
        assert cases == 100


def test_09_baseline_caches():
    with criterion(9, "LRU/LFU match the reference simulator", 30.0):
        for policy in ("lru", "lfu"):
            for capacity in (1, 2, 3, 4):
                exhaustive_check(policy, capacity, universe=4, max_len=12)
        for seed in range(100):
            blocks = np.random.default_rng([9, seed]).integers(0, 16, 10_000).tolist()
            for policy in ("lru", "lfu"):
                st = BlockCacheState(policy, 6, BS)
                ref = RefCache(policy, 6)
                for i, b in enumerate(blocks):
                    plan = impl_access(st, [b])
                    assert list(plan.miss_blocks) == ref.access([b])
                    if i % 100 == 99:
                        assert impl_canon(st) == ref.canon()
                assert impl_canon(st) == ref.canon()


def test_10_breakdown_ordering():
    with criterion(10, "default latency ordering and management share", 60.0):
        cfg = RunConfig(policies=["similarity", "lru", "prefetch_only"], compute_oracle=False)
        rows = {r["policy"]: r for r in run_experiment(cfg).rows}
        lat = {p: rows[p]["mean_step_latency_s"] for p in rows}
        print("mean step latency (s):", {p: f"{v:.4e}" for p, v in lat.items()})
        assert lat["similarity"] < lat["lru"] < lat["prefetch_only"]
        assert rows["lru"]["mgmt_share"] > rows["similarity"]["mgmt_share"]


def test_11_byte_conservation():
    with criterion(11, "byte conservation, persistent heads and cache size", 30.0):
        cfg = RunConfig(n_prompt=2048, steps=48, sigmas=[0.05])
        profile = profile_for(cfg, 0)
        for policy in (Policy.SIMILARITY, Policy.PREFETCH_ONLY):
            wl = SyntheticModel(cfg.shape, seed=0).sequence(0.05, cfg.n_prompt, cfg.steps, seed=0)
            k = math.ceil(0.10 * cfg.n_prompt)
            plan = plan_for(cfg, profile, k, policy, cfg.n_prompt, cfg.steps)
            eng = DecodeEngine(wl, apply_placement(profile, plan), plan,
                               EngineConfig(policy=policy, seed=0, compute_oracle=False))
            eng.prefill()
            per_head = np.zeros((cfg.num_layers, cfg.num_kv_heads), dtype=np.int64)
            for _ in range(cfg.steps):
                for req in eng.decode_step().transfers:
                    per_head[req.layer, req.kv_head] += req.nbytes
            res_bytes = eng.metrics.transferred_bytes
            row = cfg.shape.row_bytes()
            assert res_bytes == int(eng.metrics.misses.sum()) * 2 * k * cfg.head_dim * cfg.bytes_per_element
            assert res_bytes == int(per_head.sum())
            persistent = [(l, h) for l, lp in enumerate(plan.layers) for h in lp.persistent]
            assert persistent and all(per_head[l, h] == 0 for l, h in persistent)
            if policy is Policy.SIMILARITY:
                offloaded = len(eng.cache.heads)
                layers = len({l for l, _ in eng.cache.heads})
                expected = offloaded * 2 * (k + cfg.sink + cfg.recent) * row + layers * cfg.num_q_heads * row
                assert eng.run(0).cache_bytes == expected


def test_12_determinism(tmp_path):
    with criterion(12, "byte-identical reports across repeats and worker counts", 60.0):
        cfg = RunConfig(num_layers=3, num_q_heads=8, num_kv_heads=4, head_dim=64, n_prompt=1024, steps=16,
                        policies=["similarity", "lru"], seeds=[0, 1])
        path = tmp_path / "cfg.json"
        path.write_text(cfg.to_json())
        reports = []
        for i, workers in enumerate((1, 1, 2)):
            out = tmp_path / f"out{i}"
            assert main(["run", "--config", str(path), "--workers", str(workers), "--output-dir", str(out)]) == 0
            run_dir = next(out.iterdir())
            reports.append({name: (run_dir / name).read_bytes()
                            for name in ("report.json", "report.csv", "breakdown.csv")})
        assert reports[0] == reports[1] == reports[2]
        assert len(json.loads(reports[0]["report.json"])["rows"]) == 4
