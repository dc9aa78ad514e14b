"""Command-line entry point.

Subcommands: gen-trace, profile, run, sweep, calibrate. Every output file
starts with a header naming the tool version and a hash of the resolved
configuration. Exit codes: 0 success, 2 usage, 3 configuration, 4 I/O.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from c2csim import __version__
from c2csim.controller import ControllerParams
from c2csim.engine import POLICIES, SimConfig, Simulator, report
from c2csim.errors import SimError
from c2csim.gemm import ANCHOR_SHAPE, KernelConfig, KernelRepository, calibrate, calibrated, latency
from c2csim.hw import SUPPORTED_INSTANCE_COUNTS, InstanceResources, builtin_names, builtin_profile, mig_profile
from c2csim.scheduler import DEFAULT_CHUNKS, build_profiling_table
from c2csim.workload import (
    BurstParams, default_catalog, generate_trace, load_trace, pick_models, save_trace, trace_stats, variant_catalog,
)

OUT_ENV = "C2CSIM_OUT"
EXIT_USAGE, EXIT_CONFIG, EXIT_IO = 2, 3, 4
WEEK = 7 * 86400.0
E2E_MODELS = "llama-3.2-1b,llama-3.2-3b,llama-3.1-8b"


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def header(config: dict) -> str:
    return f"# c2csim {__version__} config={config_hash(config)}\n"


def _meta(config: dict) -> dict:
    return {"tool": "c2csim", "version": __version__, "config_hash": config_hash(config), "config": config}


def _write(path: Path, text: str):
    with open(path, "w") as fh:
        fh.write(text)


def _write_table(path: Path, config: dict, columns: list[str], rows) -> None:
    lines = [header(config), "\t".join(columns) + "\n"]
    for row in rows:
        lines.append("\t".join(_cell(v) for v in row) + "\n")
    _write(path, "".join(lines))


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "nan")
    return str(v)


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "c2csim-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _burst(args) -> BurstParams:
    defaults = BurstParams()
    return BurstParams(
        burst_mean=args.burst_mean if args.burst_mean is not None else defaults.burst_mean,
        idle_median=args.idle_median if args.idle_median is not None else defaults.idle_median,
        idle_sigma=args.idle_sigma if args.idle_sigma is not None else defaults.idle_sigma,
        rate=args.rate if args.rate is not None else defaults.rate,
    )


def _generator_config(args, catalog_ids) -> dict:
    return {"models": catalog_ids, "duration": args.duration, "seed": args.seed,
            "burst": asdict(_burst(args))}


# gen-trace

def cmd_gen_trace(args) -> int:
    if args.models < 1:
        raise UsageError("--models must be at least 1")
    catalog = variant_catalog(args.models)
    config = {"command": "gen-trace", **_generator_config(args, [m.id for m in catalog])}
    trace = generate_trace(catalog, args.duration, args.seed, _burst(args))
    stats = trace_stats(trace, duration=args.duration)
    out = _out_dir(args)
    save_trace(trace, out / "trace.csv", header(config))
    _write(out / "trace_stats.json", json.dumps({"meta": _meta(config), "stats": asdict(stats)},
                                                indent=2, sort_keys=True) + "\n")
    print(f"{len(trace)} requests for {len(stats.per_model_active_hour_fraction)} active models; "
          f"median idle fraction {stats.median_idle_fraction:.3f}, long-tail fraction {stats.long_tail_fraction:.3f}")
    return 0


# profile

def _catalog(args):
    return pick_models(args.models) if args.models else default_catalog()


def cmd_profile(args) -> int:
    cal = calibrated(args.chip)
    catalog = _catalog(args)
    migs = args.mig or list(SUPPORTED_INSTANCE_COUNTS)
    config = {"command": "profile", "chip": args.chip, "mig": migs, "models": [m.id for m in catalog],
              "chunks": args.chunk_candidates, "ttft": args.ttft}
    repo = KernelRepository.default(cal.gamma)
    table = build_profiling_table(catalog, cal.chip, migs, repo, args.chunk_candidates, ttft_budget=args.ttft)
    out = _out_dir(args)
    table.dump(out / "profiling_table.tsv", header(config))
    bad = table.infeasible()
    print(f"{len(table.entries)} entries, {len(bad)} infeasible")
    for model_id, count in bad:
        print(f"infeasible: {model_id} on {count} instance(s)")
    return 0


# run / sweep

def _controller(args) -> ControllerParams:
    return ControllerParams(tau=args.tau, eta_fast=args.eta_fast, eta_slow=args.eta_slow)


def _load_workload(args):
    """(trace, catalog, config fragment) from --trace or the generator."""
    if args.trace:
        trace = load_trace(args.trace)
        base = default_catalog()
        known = {m.id for m in base}
        ids = sorted({r.model_id for r in trace})
        catalog = base + [m for m in variant_catalog(1000) if m.id in ids and m.id not in known]
        digest = hashlib.sha256(Path(args.trace).read_bytes()).hexdigest()[:16]
        return trace, catalog, {"trace": str(args.trace), "trace_sha": digest}
    if args.seed is None:
        raise UsageError("generator mode needs --seed (or pass --trace)")
    catalog = pick_models(args.models or _str_list(E2E_MODELS))
    burst = BurstParams(burst_mean=args.burst_mean or 300.0, idle_median=args.idle_median or 150.0,
                        idle_sigma=args.idle_sigma or 0.0, rate=args.rate or 0.2)
    trace = generate_trace(catalog, args.duration, args.seed, burst)
    return trace, catalog, {"models": [m.id for m in catalog], "duration": args.duration, "seed": args.seed,
                            "burst": asdict(burst)}


def _sim_config(args) -> SimConfig:
    return SimConfig(chunk_candidates=tuple(args.chunk_candidates), controller=_controller(args))


def _simulate(job):
    chip_name, mig, policy, sim_config, catalog, trace = job
    sim = Simulator(calibrated(chip_name).chip, mig, policy, catalog, sim_config)
    result = sim.run(trace)
    return result, report(result.records, result.series, result.placements, result.policy, result.mig_instances)


RECORD_COLUMNS = ["arrival_s", "model_id", "prompt_tokens", "output_tokens", "start_class", "ttft_s", "tpot_mean_s",
                  "slo_met_ttft", "slo_met_tpot"]


def cmd_run(args) -> int:
    trace, catalog, workload = _load_workload(args)
    sim_config = _sim_config(args)
    config = {"command": "run", "chip": args.chip, "mig": args.mig, "policy": args.policy, "workload": workload,
              "sim": asdict(sim_config)}
    result, rep = _simulate((args.chip, args.mig, args.policy, sim_config, catalog, trace))
    out = _out_dir(args)
    _write(out / "report.json", json.dumps({"meta": _meta(config), "report": rep.to_dict()},
                                           indent=2, sort_keys=True, default=_cell) + "\n")
    _write(out / "report.txt", header(config) + rep.summary() + "\n")
    s = result.series
    _write_table(out / "utilization.tsv", config, ["t", "instance", "u_hbm", "u_c2c", "alpha"],
                 zip(s["t"], map(int, s["instance"]), s["u_hbm"], s["u_c2c"], s["alpha"]))
    tr = result.trajectory
    _write_table(out / "controller.tsv", config, ["t", "instance", "alpha", "delta", "latency"],
                 zip(tr["t"], map(int, tr["instance"]), tr["alpha"], tr["delta"], tr["latency"]))
    _write_table(out / "records.tsv", config, RECORD_COLUMNS,
                 ((r.request.arrival_time, r.request.model_id, r.request.prompt_tokens, r.request.output_tokens,
                   r.start_class, r.ttft, r.tpot_mean, int(r.slo_met_ttft), int(r.slo_met_tpot))
                  for r in result.records))
    print(rep.summary())
    return 0


SWEEP_COLUMNS = ["policy", "mig_instances", "requests", "failed", "p95_ttft_s", "p95_tpot_s", "ttft_attainment",
                 "tpot_attainment", "cold_start_latency_mean_s", "model_switch_latency_mean_s", "cold_starts",
                 "model_switches"]


def gemm_latency_rows(chip_name: str, counts):
    """Latency of the reference GEMM shape per MIG layout: pure symmetric,
    pure asymmetric and the best hybrid split on the 1/16 grid."""
    cal = calibrated(chip_name)
    rows = []
    for count in counts:
        res = InstanceResources.of(cal.chip, mig_profile(cal.chip, count))
        lat = {a / 16: latency(ANCHOR_SHAPE, KernelConfig(alpha=a / 16), res, cal.chip.link_bandwidth, cal.gamma)
               for a in range(17)}
        best = min(lat, key=lat.get)
        rows.append((count, lat[1.0], lat[0.0], best, lat[best]))
    return rows


def cmd_sweep(args) -> int:
    trace, catalog, workload = _load_workload(args)
    sim_config = replace(_sim_config(args), record_series=False)
    policies = args.policies or list(POLICIES)
    for p in policies:
        if p not in POLICIES:
            raise UsageError(f"unknown policy {p!r}")
    migs = args.mig or [1, 3, 7]
    config = {"command": "sweep", "chip": args.chip, "mig": migs, "policies": policies, "workload": workload,
              "sim": asdict(sim_config)}
    # timeshare always runs on the whole GPU, so one run covers every layout
    pairs = dict.fromkeys((p, 1 if p == "timeshare" else m) for p in policies for m in migs)
    jobs = [(args.chip, m, p, sim_config, catalog, trace) for p, m in pairs]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_simulate, jobs))
    else:
        results = [_simulate(j) for j in jobs]
    rows = []
    for (_, mig, policy, *_), (_, rep) in zip(jobs, results):
        rows.append((policy, rep.mig_instances, rep.n_requests, rep.n_failed, rep.p95_ttft, rep.p95_tpot,
                     rep.ttft_attainment, rep.tpot_attainment, rep.cold_start_latency_mean,
                     rep.model_switch_latency_mean, rep.cold_starts, rep.model_switches))
    out = _out_dir(args)
    _write_table(out / "comparison.tsv", config, SWEEP_COLUMNS, rows)
    _write_table(out / "gemm_latency.tsv", config, ["mig_instances", "sym_s", "asym_s", "best_alpha", "best_s"],
                 gemm_latency_rows(args.chip, migs))
    for row in rows:
        print(f"{row[0]:>13} mig={row[1]} ttft_att={row[6]:.3f} tpot_att={row[7]:.3f} "
              f"cold={_cell(row[8])} switch={_cell(row[9])}")
    return 0


# calibrate

def cmd_calibrate(args) -> int:
    cal = calibrate(builtin_profile(args.chip)) if args.chip == "gh200" else calibrated(args.chip)
    config = {"command": "calibrate", "chip": args.chip}
    out = _out_dir(args)
    KernelRepository.default(cal.gamma).dump(out / "kernel_repository.tsv", header(config))
    body = {"meta": _meta(config), "gamma": asdict(cal.gamma), "c2c_efficiency": cal.chip.c2c_efficiency,
            "hbm_efficiency": cal.chip.hbm_efficiency, "flops_per_sm": cal.chip.flops_per_sm,
            "residuals": cal.residuals}
    _write(out / "calibration.json", json.dumps(body, indent=2, sort_keys=True) + "\n")
    for key, value in sorted(cal.residuals.items()):
        print(f"{key:>13}: {value:+.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c2csim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"c2csim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./c2csim-out)")
        p.add_argument("--chip", default="gh200", choices=builtin_names())

    def generator(p, seed_default):
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--burst-mean", type=float, help="mean burst length, seconds")
        p.add_argument("--idle-median", type=float, help="median of per-model mean idle period, seconds")
        p.add_argument("--idle-sigma", type=float, help="log-normal spread of idle periods across models")
        p.add_argument("--rate", type=float, help="in-burst arrival rate, requests/s")

    p = sub.add_parser("gen-trace", help="generate a synthetic long-tail trace")
    common(p)
    generator(p, 0)
    p.add_argument("--models", type=int, default=89, help="number of catalog models")
    p.add_argument("--duration", type=float, default=3 * WEEK, help="seconds")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("profile", help="build the chunk-size profiling table")
    common(p)
    p.add_argument("--mig", type=_int_list, help="MIG instance counts (default: all)")
    p.add_argument("--models", type=_str_list, help="model ids (default: built-in catalog)")
    p.add_argument("--chunk-candidates", type=_int_list, default=list(DEFAULT_CHUNKS))
    p.add_argument("--ttft", type=float, help="TTFT budget in seconds (default: per-model SLO minus switch cost)")
    p.set_defaults(func=cmd_profile)

    for name, func in (("run", cmd_run), ("sweep", cmd_sweep)):
        p = sub.add_parser(name, help="simulate one configuration" if name == "run" else
                           "simulate policies x MIG layouts in parallel")
        common(p)
        generator(p, None)
        p.add_argument("--trace", help="trace file (default: generate a 3-model contended workload)")
        p.add_argument("--models", type=_str_list, help=f"generator model ids (default {E2E_MODELS})")
        p.add_argument("--duration", type=float, default=1200.0, help="generator duration, seconds")
        p.add_argument("--chunk-candidates", type=_int_list, default=list(DEFAULT_CHUNKS))
        p.add_argument("--controller.tau", dest="tau", type=float, default=ControllerParams.tau)
        p.add_argument("--controller.eta-fast", dest="eta_fast", type=float, default=ControllerParams.eta_fast)
        p.add_argument("--controller.eta-slow", dest="eta_slow", type=float, default=ControllerParams.eta_slow)
        if name == "run":
            p.add_argument("--mig", type=int, default=3, choices=SUPPORTED_INSTANCE_COUNTS)
            p.add_argument("--policy", default="c2cserve", choices=POLICIES)
        else:
            p.add_argument("--mig", type=_int_list, help="MIG instance counts (default 1,3,7)")
            p.add_argument("--policies", type=_str_list, help="policies (default: all)")
            p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
        p.set_defaults(func=func)

    p = sub.add_parser("calibrate", help="fit cost-model constants and write the kernel repository")
    common(p)
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"c2csim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SimError, ValueError) as exc:
        print(f"c2csim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"c2csim: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
