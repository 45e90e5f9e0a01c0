"""Experiment grid runner: profile, plan, decode and write reports.

Every grid cell (policy, sigma, top-k ratio, seed) is an independent,
fully seeded simulation, so cells can run on any number of worker
processes and still produce byte-identical report files.
"""

from __future__ import annotations

import csv
import io
import json
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import Policy
from .config import RunConfig
from .engine import DecodeEngine, EngineConfig, topk_size
from .errors import ConfigurationError
from .head_profile import (
    LayerPartition,
    ModelProfile,
    PartitionPlan,
    apply_placement,
    build_profile,
    fit_importance,
    plan_partition,
    profile_similarity,
)
from .pipeline import CATEGORIES, CSV_COLUMNS
from .workload import SyntheticModel, TraceWorkload

REPORT_COLUMNS = [
    "policy", "sigma", "topk_ratio", "seed", "k", "steps",
    "hit_ratio", "hits", "misses", "transferred_bytes", "init_transfer_bytes",
    "refetch_bytes", "persistent_served_bytes", "persistent_heads", "cache_bytes",
    "mean_rel_error", "max_rel_error", "block_hit_ratio",
    "mean_step_latency_s", "total_latency_s",
    "compute_share", "transfer_share", "mgmt_share", "sync_share", "retrieval_share",
]
BREAKDOWN_PREFIX = ["policy", "sigma", "topk_ratio", "seed"]


def model_for(cfg: RunConfig, seed: int) -> SyntheticModel:
    return SyntheticModel(cfg.shape, hidden_dim=cfg.hidden_dim, layer_drift=cfg.layer_drift,
                          query_bias=cfg.query_bias, prompt_sigma=cfg.prompt_sigma,
                          importance_beta=tuple(cfg.importance_beta), seed=seed)


def workload_for(cfg: RunConfig, sigma: float, seed: int):
    if cfg.trace:
        wl = TraceWorkload(cfg.trace)
        if wl.shape.num_kv_heads != cfg.num_kv_heads or wl.shape.num_q_heads != cfg.num_q_heads:
            raise ConfigurationError("trace shape does not match the configured model shape")
        return wl
    return model_for(cfg, seed).sequence(sigma, cfg.n_prompt, cfg.steps, seed)


def load_importance(path, shape) -> np.ndarray:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read importance file {path}: {exc}") from exc
    if isinstance(doc, dict):
        doc = doc.get("importance")
    imp = np.asarray(doc, dtype=np.float64)
    if imp.shape != (shape.num_layers, shape.num_q_heads):
        raise ConfigurationError(
            f"importance must be {shape.num_layers} x {shape.num_q_heads}, got {imp.shape}")
    if np.any(imp < 0) or np.any(imp > 1):
        raise ConfigurationError("importance scores must lie in [0, 1]")
    return imp


def profile_for(cfg: RunConfig, seed: int) -> ModelProfile:
    """Offline profile: adjacent-query similarity and fitted head importance."""
    s = cfg.shape
    L, hq = s.num_layers, s.num_q_heads
    sigma = cfg.sigmas[0] if cfg.profile_sigma is None else cfg.profile_sigma
    if cfg.trace:
        Q = TraceWorkload(cfg.trace).query_trace()
        if cfg.importance_file is None:
            raise ConfigurationError("trace runs need an importance file")
    else:
        model = model_for(cfg, seed)
        Q = model.query_trace(sigma, cfg.profile_sequences, cfg.profile_steps, seed)
    S, T = Q.shape[:2]
    s_hat = profile_similarity(Q.reshape(S, T, L * hq, s.head_dim)).reshape(L, hq)
    if cfg.importance_file is not None:
        imp = load_importance(cfg.importance_file, s)
    else:
        full, stream, target = model.importance_samples(
            sigma, cfg.n_prompt, cfg.importance_samples, seed,
            cfg.sink, cfg.recent, noise=cfg.importance_noise)
        flat = (L * hq, cfg.importance_samples, s.head_dim)
        imp = fit_importance(full.reshape(flat), stream.reshape(flat), target.reshape(flat)).alpha.reshape(L, hq)
    return build_profile(imp, s_hat, s.group_size, cfg.eta, cfg.p, cfg.epsilon)


def head_bytes(cfg: RunConfig, n_prompt: int, steps: int) -> int:
    return 2 * (n_prompt + steps) * cfg.shape.row_bytes()


def plan_for(cfg: RunConfig, profile: ModelProfile, k: int, policy: Policy,
             n_prompt: int, steps: int) -> PartitionPlan:
    """Placement for one cell; block and prefetch-only baselines keep only layer 0."""
    cost = cfg.cost_model()
    mem_head = 2 * k * cfg.shape.row_bytes()
    plan = plan_partition(profile, cost.t_comp, cost.pcie_peak_bw, mem_head,
                          cfg.hbm_budget, head_bytes(cfg, n_prompt, steps))
    if policy is Policy.SIMILARITY:
        return plan
    h = cfg.num_kv_heads
    layers = [LayerPartition(0, plan.layers[0].n_difficult, plan.layers[0].n_prefetchable, h, list(range(h)))]
    layers += [LayerPartition(lp.layer, lp.n_difficult, lp.n_prefetchable, 0, []) for lp in plan.layers[1:]]
    return PartitionPlan(layers, cfg.hbm_budget, h * head_bytes(cfg, n_prompt, steps), [])


@dataclass
class CellResult:
    row: dict
    breakdown: list[dict]


def _share(breakdown: dict, key: str) -> float:
    return breakdown[CATEGORIES[key]]


def run_cell(cfg: RunConfig, profile_json: str, policy: str, sigma: float, ratio: float, seed: int) -> CellResult:
    profile = ModelProfile.from_json(profile_json)
    policy = Policy(policy)
    wl = workload_for(cfg, sigma, seed)
    k = topk_size(ratio, wl.n_prompt)
    plan = plan_for(cfg, profile, k, policy, wl.n_prompt, wl.n_steps)
    ecfg = EngineConfig(
        policy=policy, mode=cfg.mode, topk_ratio=ratio, sink_count=cfg.sink,
        recent_count=cfg.recent, retriever=cfg.retriever, hash_bits=cfg.hash_bits,
        block_size=cfg.block_size, block_capacity_factor=cfg.block_capacity_factor,
        seed=seed, tau_override=cfg.tau_override, refetch_on_divergence=cfg.refetch_on_divergence,
        compute_oracle=cfg.compute_oracle, cost=cfg.cost_model(),
    )
    result = DecodeEngine(wl, apply_placement(profile, plan), plan, ecfg).run()
    m = result.metrics.summary()
    tl = result.timeline
    shares = tl.breakdown()
    row = {
        "policy": policy.value, "sigma": sigma, "topk_ratio": ratio, "seed": seed, "k": k,
        "steps": tl.num_steps,
        "hit_ratio": None if math.isnan(m["hit_ratio"]) else m["hit_ratio"],
        "hits": m["hits"], "misses": m["misses"],
        "transferred_bytes": m["transferred_bytes"],
        "init_transfer_bytes": m["init_transfer_bytes"],
        "refetch_bytes": m["refetch_bytes"],
        "persistent_served_bytes": m["persistent_served_bytes"],
        "persistent_heads": sum(len(lp.persistent) for lp in plan.layers),
        "cache_bytes": result.cache_bytes,
        "mean_rel_error": m["mean_rel_error"], "max_rel_error": m["max_rel_error"],
        "block_hit_ratio": m["block_hit_ratio"],
        "mean_step_latency_s": tl.mean_step_latency(), "total_latency_s": tl.total,
    }
    for key in CATEGORIES:
        row[f"{key}_share"] = _share(shares, key)
    prefix = {"policy": policy.value, "sigma": sigma, "topk_ratio": ratio, "seed": seed}
    breakdown = [dict(prefix, **r) for r in tl.per_layer_mean()]
    return CellResult(row, breakdown)


def _run_cell_args(args) -> CellResult:
    return run_cell(*args)


@dataclass
class ExperimentReport:
    config: RunConfig
    rows: list[dict]
    breakdown: list[dict]
    profiles: dict
    run_dir: Path | None = None

    def to_json(self) -> str:
        doc = {"config_hash": self.config.digest(), "rows": self.rows}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        return _csv(REPORT_COLUMNS, self.rows)

    def breakdown_csv(self) -> str:
        return _csv(BREAKDOWN_PREFIX + CSV_COLUMNS, self.breakdown)

    def sections(self) -> dict[str, list[dict]]:
        out: dict[str, list[dict]] = {}
        for r in self.rows:
            out.setdefault(r["policy"], []).append(r)
        return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: _fmt(r.get(c)) for c in columns})
    return buf.getvalue()


def grid(cfg: RunConfig) -> list[tuple]:
    return [(p, s, r, seed) for p in cfg.policies for s in cfg.sigmas
            for r in cfg.topk_ratios for seed in cfg.seeds]


def run_experiment(cfg: RunConfig, output_dir=None, workers: int | None = None) -> ExperimentReport:
    cfg.validate()
    workers = cfg.workers if workers is None else workers
    if workers < 1:
        raise ConfigurationError("workers must be positive")
    profiles = {seed: profile_for(cfg, seed).to_json() for seed in cfg.seeds}
    jobs = [(cfg, profiles[seed], p, s, r, seed) for p, s, r, seed in grid(cfg)]
    if workers == 1 or len(jobs) == 1:
        results = [_run_cell_args(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell_args, jobs))
    report = ExperimentReport(
        config=cfg,
        rows=[r.row for r in results],
        breakdown=[b for r in results for b in r.breakdown],
        profiles=profiles,
    )
    out = output_dir if output_dir is not None else cfg.output_dir
    if out is not None:
        report.run_dir = write_report(report, out)
    return report


def _new_run_dir(root: Path, stem: str) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    i = 0
    while True:
        d = root / (stem if i == 0 else f"{stem}-{i}")
        try:
            d.mkdir()
            return d
        except FileExistsError:
            i += 1


def write_report(report: ExperimentReport, output_dir) -> Path:
    """Write a fresh run directory; existing runs are never touched."""
    root = Path(output_dir)
    try:
        run_dir = _new_run_dir(root, f"run-{report.config.digest()[:12]}")
        (run_dir / "report.json").write_text(report.to_json())
        (run_dir / "report.csv").write_text(report.to_csv())
        (run_dir / "breakdown.csv").write_text(report.breakdown_csv())
        (run_dir / "config.json").write_text(report.config.to_json())
        manifest = {
            "config_hash": report.config.digest(),
            "versions": {"kvoffload": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            "files": ["report.json", "report.csv", "breakdown.csv", "config.json"],
            "cells": len(report.rows),
        }
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise ConfigurationError(f"cannot write reports under {root}: {exc}") from exc
    return run_dir
