"""Command-line entry point.

Exit codes: 0 success, 2 infeasible or invalid config, 3 simulation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import analyzer
from .config import ConfigError, ExperimentConfig, defaults_yaml, parse_quantity
from .desim import ConfigurationError, SimulationError
from .experiment import run_experiment, simulate
from .model import ValidationError
from .workload import Synthetic, build_workload, dumps_trace, trace_stats

EXIT_OK, EXIT_INFEASIBLE, EXIT_SIMULATION = 0, 2, 3


def _load(path) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def cmd_analyze(args) -> int:
    cfg = _load(args.config).cluster
    over = {k: getattr(args, k) for k in ("prefill_nodes", "decode_nodes", "gpus_per_node",
                                          "storage_ratio") if getattr(args, k) is not None}
    if args.cnic_bw is not None:
        over["cnic_bw"] = parse_quantity(args.cnic_bw, "--cnic-bw", rate=True)
    if args.dram_bw is not None:
        over["dram_bw"] = parse_quantity(args.dram_bw, "--dram-bw", rate=True)
    cfg = replace(cfg, **over)
    out = analyzer.analyze(cfg)
    if args.model:
        spec = analyzer.ModelSpec.load(args.model)
        out["cache_compute_ratio_gb_per_pflop"] = {
            str(c): analyzer.cache_compute_ratio(spec, c, min(args.append, c))
            for c in args.context}
    if args.json:
        print(json.dumps(out, indent=1, sort_keys=True))
    else:
        lr = out["link_loads"]
        print(f"P/D = {cfg.prefill_nodes}/{cfg.decode_nodes}  g={cfg.gpus_per_node}  "
              f"s={cfg.storage_ratio:g}  M/(Bs)={cfg.dram_bw / cfg.storage_bw:g}")
        rng = out["feasible_range"]
        if rng:
            print(f"feasible P/D range: [{rng['lo']}, {rng['hi']}]"
                  f"{'  (empty)' if rng['empty'] else ''}")
        for k in analyzer.CONSTRAINTS:
            print(f"  {k:<14} {lr[k] / 1e9:9.3f} GB/s  util {out['utilization'][k]:.3f}")
        print(f"binding: {out['binding_constraint']}  feasible: {out['feasible']}")
        for c, r in out.get("cache_compute_ratio_gb_per_pflop", {}).items():
            print(f"  cache-compute ratio @ {c} tokens: {r:.2f} GB/PFLOP")
    return EXIT_OK if out["feasible"] else EXIT_INFEASIBLE


def cmd_simulate(args) -> int:
    cfg = _load(args.config)
    if args.policy:
        cfg = replace(cfg, policy=args.policy)
    rep = simulate(cfg, events=args.events)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dumps())
    (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True))
    (out / "utilization.csv").write_text(rep.utilization_csv())
    if args.events:
        (out / "events.jsonl").write_text(rep.event_log())
    d = rep.to_dict()
    print(json.dumps(d.get("offline") or d.get("online"), sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args.config)
    results = run_experiment(cfg, args.out, jobs=args.jobs, events=args.events)
    status = [r["status"] for r in results]
    print(f"{status.count('ok')}/{len(status)} cells ok -> {args.out}/summary.csv")
    if "simulation_error" in status:
        return EXIT_SIMULATION
    if "infeasible" in status:
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_gen_trace(args) -> int:
    wl = _load(args.config).workload
    src = wl.source
    if isinstance(src, Synthetic) or args.config is None:
        base = src if isinstance(src, Synthetic) else Synthetic(65536, 157, 429, 176, 500)
        over = {k: v for k, v in (("max_len", args.max_len), ("mean_turns", args.turns),
                                  ("mean_append", args.append), ("mean_gen", args.gen),
                                  ("count", args.count), ("seed", args.seed)) if v is not None}
        wl = replace(wl, source=replace(base, **over))
    if args.append_scale is not None or args.gen_scale is not None:
        wl = replace(wl, append_scale=args.append_scale or 1.0, gen_scale=args.gen_scale or 1.0)
    trajs = build_workload(wl)
    text = dumps_trace(trajs)
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
        stats = trace_stats(trajs)
        print(" ".join(f"{k}={v:.1f}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in stats.items()), file=sys.stderr)
    return EXIT_OK


def cmd_print_defaults(args) -> int:
    sys.stdout.write(defaults_yaml())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvpath", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="closed-form link loads and feasible P/D range")
    a.add_argument("--config")
    a.add_argument("-P", "--prefill-nodes", type=int)
    a.add_argument("-D", "--decode-nodes", type=int)
    a.add_argument("-g", "--gpus-per-node", type=int)
    a.add_argument("-s", "--storage-ratio", type=float)
    a.add_argument("--cnic-bw", help="e.g. 400Gbps")
    a.add_argument("--dram-bw", help="e.g. 500GB/s")
    a.add_argument("--model", help="model name or YAML path for the cache-compute ratio")
    a.add_argument("--context", type=int, nargs="+", default=[16384, 65536])
    a.add_argument("--append", type=int, default=429)
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run one simulation")
    s.add_argument("config")
    s.add_argument("--out", default="run")
    s.add_argument("--policy", choices=["dual_path", "pe_only", "oracle"])
    s.add_argument("--events", action="store_true", help="also write the event log")
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="run every cell of the config's sweep grid")
    w.add_argument("config")
    w.add_argument("--out", default="sweep")
    w.add_argument("-j", "--jobs", type=int, default=1)
    w.add_argument("--events", action="store_true")
    w.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gen-trace", help="write a synthetic trace file")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--max-len", type=int)
    g.add_argument("--turns", type=float)
    g.add_argument("--append", type=float)
    g.add_argument("--gen", type=float)
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--append-scale", type=float)
    g.add_argument("--gen-scale", type=float)
    g.set_defaults(func=cmd_gen_trace)

    d = sub.add_parser("print-defaults", help="print the full default config")
    d.set_defaults(func=cmd_print_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
