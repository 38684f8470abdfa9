"""Command line: single runs, seed/parameter sweeps and the oracle checks.

    mecavoid run --config paper_centralized --seed 1 --out out/
    mecavoid sweep --config paper_centralized --axis beaconing=dynamic,fixed:10 --runs 10 --out sweep/
    mecavoid oracle [closest|cubic|fading|examples|all]
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats

from mecavoid.config import ConfigError, ScenarioConfig
from mecavoid.engine import run, sweep_seed
from mecavoid.metrics import write_collisions_csv, write_load_csv
from mecavoid.oracles import SUITES, run_suite

ALERTS_HEADER = ["issued_at", "tagged_id", "other_id", "t_star", "d_star"]
TRAJECTORY_HEADER = ["t", "id", "kind", "x", "y", "speed"]
# scenario fields a sweep axis may vary, with their parsers
AXES = {
    "mode": str,
    "beaconing": str,
    "penetration": float,
    "buildings": str,
    "duration_s": float,
    "ground_truth": str,
}
KPIS = ["detection_rate", "undetected_fraction", "fp_count", "fn_count", "alerted_pairs", "fp_share",
        "vv_detection_rate", "vv_undetected_fraction", "vp_detection_rate", "load_msgs_per_s",
        "vehicles_mean"]


def load_config(path: str) -> ScenarioConfig:
    """An INI config, a canonical config name, or a report.json whose config echo is reused."""
    p = Path(path)
    if p.suffix == ".json" and p.is_file():
        data = json.loads(p.read_text())
        return ScenarioConfig.from_dict(data.get("config", data), base_dir=p.parent)
    return ScenarioConfig.from_file(path)


def apply_overrides(cfg: ScenarioConfig, args) -> ScenarioConfig:
    return cfg.with_overrides(mode=args.mode, penetration=args.penetration, beaconing=args.beaconing,
                              duration_s=args.duration, master_seed=args.seed)


def write_run(out: Path, trace, report) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    with open(out / "collisions.csv", "w", newline="") as fh:
        write_collisions_csv(report.records, fh)
    with open(out / "load.csv", "w", newline="") as fh:
        write_load_csv(report.load_times, report.load_series, fh)
    with open(out / "alerts.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ALERTS_HEADER)
        for a in trace.alerts:
            w.writerow([f"{a.issued_at:.6f}", a.tagged_id, a.other_id,
                        f"{a.predicted_t_star:.6f}", f"{a.predicted_d_star:.6f}"])


def write_trace(out: Path, trace) -> None:
    (out / "trace.jsonl").write_text(trace.to_jsonl())
    with open(out / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for t, eid, kind, x, y, v in trace.positions:
            w.writerow([f"{t:.3f}", eid, kind, f"{x:.4f}", f"{y:.4f}", f"{v:.4f}"])


def headline(report) -> dict:
    d = report.to_dict()
    vv = d["by_pair_kind"]["vehicle-vehicle"]
    vp = d["by_pair_kind"]["vehicle-pedestrian"]
    return {
        "detection_rate": d["detection_rate"],
        "undetected_fraction": d["undetected_fraction"],
        "fp_count": d["fp_count"],
        "fn_count": d["fn_count"],
        "alerted_pairs": d["alerted_pairs"],
        "fp_share": d["fp_share"],
        "vv_detection_rate": vv["detection_rate"],
        "vv_undetected_fraction": vv["undetected_fraction"],
        "vp_detection_rate": vp["detection_rate"],
        "load_msgs_per_s": d["bsm_load"]["steady_state_msgs_per_s"],
        "vehicles_mean": d["population"]["vehicles_mean"],
    }


def cmd_run(args) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    out = Path(args.out or cfg.output_dir)
    trace, report = run(cfg, trace=args.trace)
    write_run(out, trace, report)
    if args.trace:
        write_trace(out, trace)
    s = headline(report)
    print(f"seed={report.seed} detection={_fmt(s['detection_rate'])} fp={s['fp_count']} "
          f"fn={s['fn_count']} load={_fmt(s['load_msgs_per_s'])} msgs/s -> {out}")
    return 0


def parse_axis(spec: str) -> tuple[str, list]:
    name, sep, values = spec.partition("=")
    name = name.strip()
    if not sep or not values.strip():
        raise ConfigError("axis", f"expected name=v1,v2,... got {spec!r}")
    if name == "duration":
        name = "duration_s"
    if name not in AXES:
        raise ConfigError("axis", f"unknown axis {name!r}; choose from {', '.join(AXES)}")
    try:
        return name, [AXES[name](v.strip()) for v in values.split(",")]
    except ValueError as exc:
        raise ConfigError(f"axis.{name}", str(exc)) from None


def parse_seeds(args, master: int) -> list[int]:
    if args.seeds is not None:
        seeds = [int(s) for s in args.seeds.replace(",", " ").split()]
    else:
        seeds = [sweep_seed(master, i) for i in range(args.runs)]
    if not seeds:
        raise ConfigError("seeds", "empty seed list")
    return seeds


def _sweep_job(job):
    cfg, seed = job
    return headline(run(cfg, seed=seed)[1])


def mean_ci(values, level: float = 0.95) -> tuple[float | None, float | None]:
    x = np.array([v for v in values if v is not None], dtype=float)
    if len(x) == 0:
        return None, None
    if len(x) == 1:
        return float(x[0]), None
    half = stats.t.ppf(0.5 + level / 2, len(x) - 1) * x.std(ddof=1) / math.sqrt(len(x))
    return float(x.mean()), float(half)


def cmd_sweep(args) -> int:
    base = apply_overrides(load_config(args.config), args)
    axes = [parse_axis(a) for a in args.axis] or [("mode", [base.mode])]
    seeds = parse_seeds(args, base.master_seed)
    names = [n for n, _ in axes]
    combos = list(itertools.product(*[v for _, v in axes]))
    cfgs = [base.with_overrides(**dict(zip(names, c))) for c in combos]
    jobs = [(cfg, s) for cfg in cfgs for s in seeds]
    workers = args.jobs or os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]

    out = Path(args.out or base.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for (cfg, seed), kpi in zip(jobs, results):
        rows.append({**{n: getattr(cfg, n) for n in names}, "seed": seed, **kpi})
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names + ["seed"] + KPIS, lineterminator="\n")
        w.writeheader()
        w.writerows({k: _cell(v) for k, v in r.items()} for r in rows)
    summary = []
    for combo in combos:
        sel = [r for r in rows if tuple(r[n] for n in names) == combo]
        entry = dict(zip(names, combo), runs=len(sel))
        for k in KPIS:
            entry[f"{k}_mean"], entry[f"{k}_ci95"] = mean_ci(r[k] for r in sel)
        summary.append(entry)
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]), lineterminator="\n")
        w.writeheader()
        w.writerows({k: _cell(v) for k, v in r.items()} for r in summary)
    for entry in summary:
        label = " ".join(f"{n}={entry[n]}" for n in names)
        print(f"{label} runs={entry['runs']} detection={_fmt(entry['detection_rate_mean'])} "
              f"undetected={_fmt(entry['undetected_fraction_mean'])} fp={_fmt(entry['fp_count_mean'])} "
              f"load={_fmt(entry['load_msgs_per_s_mean'])}")
    print(f"{len(rows)} rows -> {out / 'sweep.csv'}")
    return 0


def cmd_oracle(args) -> int:
    results = run_suite(args.suite)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + "; ".join(failed), file=sys.stderr)
        return 1
    return 0


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4g}"


def _add_scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="INI file, canonical config name, or report.json")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--mode", choices=["centralized", "distributed"])
    p.add_argument("--penetration", type=float)
    p.add_argument("--beaconing", help="dynamic or fixed:<hz>")
    p.add_argument("--duration", type=float, help="simulated seconds")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mecavoid", description="Collision-warning simulator for road users")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario")
    _add_scenario_flags(p)
    p.add_argument("--trace", action="store_true", help="also write trace.jsonl and trajectories.csv")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a grid of scenarios over several seeds")
    _add_scenario_flags(p)
    p.add_argument("--axis", action="append", default=[], help="name=v1,v2,... (repeatable)")
    p.add_argument("--runs", type=int, default=10, help="number of derived seeds")
    p.add_argument("--seeds", help="explicit seed list, e.g. 1,2,3 (overrides --runs)")
    p.add_argument("--jobs", type=int, help="worker processes (default: all cores)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="brute-force reference checks")
    p.add_argument("suite", nargs="?", default="all", choices=["all", *SUITES])
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
