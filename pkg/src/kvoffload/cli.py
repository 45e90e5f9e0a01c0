"""Command-line front end: ``kvoffload {profile,plan,run,report}``.

Every flag has a config-file equivalent; flags override values read from
``--config``.  Exit status: 0 success, 2 usage, 3 configuration, 4 runtime.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .config import RunConfig
from .engine import topk_size
from .errors import ConfigurationError, KVOffloadError
from .experiment import REPORT_COLUMNS, profile_for, run_experiment
from .head_profile import ModelProfile, plan_partition

OUTPUT_ENV = "KVOFFLOAD_OUTPUT_DIR"
DEFAULT_OUTPUT = "runs"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4


class UsageError(Exception):
    pass


# flag name -> (config key, type, append?)
_OVERRIDES = {
    "layers": ("num_layers", int, False),
    "q_heads": ("num_q_heads", int, False),
    "kv_heads": ("num_kv_heads", int, False),
    "head_dim": ("head_dim", int, False),
    "bytes_per_element": ("bytes_per_element", int, False),
    "hidden_dim": ("hidden_dim", int, False),
    "layer_drift": ("layer_drift", float, False),
    "query_bias": ("query_bias", float, False),
    "prompt_sigma": ("prompt_sigma", float, False),
    "n_prompt": ("n_prompt", int, False),
    "steps": ("steps", int, False),
    "trace": ("trace", str, False),
    "policy": ("policies", str, True),
    "sigma": ("sigmas", float, True),
    "topk_ratio": ("topk_ratios", float, True),
    "seed": ("seeds", int, True),
    "eta": ("eta", float, False),
    "p": ("p", float, False),
    "epsilon": ("epsilon", float, False),
    "sink": ("sink", int, False),
    "recent": ("recent", int, False),
    "retriever": ("retriever", str, False),
    "hash_bits": ("hash_bits", int, False),
    "block_size": ("block_size", int, False),
    "mode": ("mode", str, False),
    "tau_override": ("tau_override", float, False),
    "profile_sequences": ("profile_sequences", int, False),
    "profile_steps": ("profile_steps", int, False),
    "importance": ("importance_file", str, False),
    "hbm_budget": ("hbm_budget", float, False),
    "workers": ("workers", int, False),
    "output_dir": ("output_dir", str, False),
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    for flag, (_, typ, append) in _OVERRIDES.items():
        name = "--" + flag.replace("_", "-")
        if append:
            p.add_argument(name, dest=flag, type=typ, action="append")
        else:
            p.add_argument(name, dest=flag, type=typ)
    p.add_argument("--refetch-on-divergence", action="store_true", default=None)
    p.add_argument("--cost", action="append", metavar="NAME=VALUE",
                   help="override one cost-model constant, e.g. t_comp=8e-5")


def resolve_config(args) -> RunConfig:
    doc = RunConfig.load(args.config).to_dict() if args.config else RunConfig().to_dict()
    for flag, (key, _, _) in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            doc[key] = v
    if getattr(args, "refetch_on_divergence", None):
        doc["refetch_on_divergence"] = True
    for item in getattr(args, "cost", None) or []:
        name, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--cost expects NAME=VALUE, got {item!r}")
        try:
            doc["cost"][name] = float(value)
        except ValueError as exc:
            raise UsageError(f"--cost value for {name} is not a number") from exc
    if doc.get("output_dir") is None:
        doc["output_dir"] = os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT)
    return RunConfig.from_dict(doc)


def cmd_profile(args) -> int:
    cfg = resolve_config(args)
    seed = cfg.seeds[0]
    profile = profile_for(cfg, seed)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "profile.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    profile.save(out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = resolve_config(args)
    if not Path(args.profile).exists():
        raise UsageError(f"profile file {args.profile} does not exist")
    try:
        profile = ModelProfile.load(args.profile)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed profile {args.profile}: {exc}") from exc
    if profile.num_kv_heads != cfg.num_kv_heads or profile.num_layers != cfg.num_layers:
        cfg = cfg.replace(num_layers=profile.num_layers, num_kv_heads=profile.num_kv_heads,
                          num_q_heads=profile.num_kv_heads * len(profile.layers[0][0].q_importance))
    k = args.k if args.k is not None else topk_size(cfg.topk_ratios[0], cfg.n_prompt)
    cost = cfg.cost_model()
    mem_head = 2 * k * cfg.shape.row_bytes()
    plan = plan_partition(profile, cost.t_comp, cost.pcie_peak_bw, mem_head, cfg.hbm_budget,
                          2 * (cfg.n_prompt + cfg.steps) * cfg.shape.row_bytes())
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "plan.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(plan.to_json())
    print(plan.table())
    if plan.shortfall_heads:
        print(f"budget shortfall: {len(plan.shortfall_heads)} difficult heads left offloaded")
    print(f"wrote {out}")
    return EXIT_OK


def summary_table(rows) -> str:
    cols = ["policy", "sigma", "topk_ratio", "seed", "hit_ratio", "transferred_bytes",
            "mean_step_latency_s", "mgmt_share", "mean_rel_error"]
    sections: dict[str, list] = {}
    for r in rows:
        sections.setdefault(str(r["policy"]), []).append(r)
    lines = []
    for policy, group in sections.items():
        lines.append(f"[{policy}]")
        lines.append("  ".join(f"{c:>18}" for c in cols[1:]))
        for r in group:
            lines.append("  ".join(f"{_cell(r.get(c)):>18}" for c in cols[1:]))
    return "\n".join(lines)


def _cell(v) -> str:
    if v is None or v == "":
        return "-"
    if isinstance(v, str):
        try:
            v = float(v) if any(ch in v for ch in ".eE") else int(v)
        except ValueError:
            return v
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    report = run_experiment(cfg, output_dir=cfg.output_dir)
    print(summary_table(report.rows))
    print(f"wrote {report.run_dir}")
    return EXIT_OK


def _read_rows(path: Path) -> list[dict]:
    if path.is_dir():
        path = path / "report.json"
    if not path.exists():
        raise UsageError(f"{path} does not exist")
    if path.suffix == ".json":
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"malformed report {path}: {exc}") from exc
        return doc["rows"] if isinstance(doc, dict) else doc
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args) -> int:
    rows = _read_rows(Path(args.path))
    if args.full:
        cols = [c for c in REPORT_COLUMNS if any(c in r for r in rows)]
        print("\t".join(cols))
        for r in rows:
            print("\t".join(_cell(r.get(c)) for c in cols))
    else:
        print(summary_table(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvoffload", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="profile head similarity and importance")
    _add_config_flags(p)
    p.add_argument("--out", help="profile JSON path (default: <output-dir>/profile.json)")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("plan", help="compute the persistent/offloaded head partition")
    _add_config_flags(p)
    p.add_argument("--profile", required=True, help="profile JSON written by 'profile'")
    p.add_argument("--k", type=int, help="top-k size (default: topk ratio times n_prompt)")
    p.add_argument("--out", help="plan JSON path (default: <output-dir>/plan.json)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="run the experiment grid and write reports")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="render a report as a table")
    p.add_argument("path", help="run directory, report.json or report.csv")
    p.add_argument("--full", action="store_true", help="print every report column")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (KVOffloadError, OSError, MemoryError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
