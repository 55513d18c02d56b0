"""Sweep execution: one simulation per grid cell, written to a run directory.

Layout of a run directory::

    config.yaml              snapshot of the resolved config
    cells/<name>.json        metrics report of each cell (or its error)
    cells/<name>.util.csv    per-link utilization
    cells/<name>.events.jsonl  event log (only with events=True)
    summary.csv              one row per successful cell
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from .config import SWEEP_AXES, ConfigError, ExperimentConfig, with_cell
from .desim import ConfigurationError, SimulationError, run_offline, run_online
from .model import ValidationError
from .workload import AllAtZero, Poisson, TraceFile, build_workload

log = logging.getLogger(__name__)

SUMMARY_STATS = ("jct_s", "ttft_mean", "ttft_p50", "ttft_p99", "ttst_mean", "tpot_mean",
                 "stop_reason")


def grid(cfg: ExperimentConfig) -> List[Dict[str, Any]]:
    axes = [a for a in SWEEP_AXES if a in cfg.sweep]
    if not axes:
        return [{}]
    return [dict(zip(axes, vals)) for vals in itertools.product(*(cfg.sweep[a] for a in axes))]


def cell_name(index: int, cell: Dict[str, Any]) -> str:
    parts = [f"{k}-{v}" for k, v in cell.items()]
    return "_".join([f"c{index:03d}"] + parts).replace("/", "-")


def _workload_for(cfg: ExperimentConfig):
    wl = cfg.workload
    if isinstance(wl.source, TraceFile):
        wl = replace(wl, source=TraceFile(str(cfg.resolve_path(wl.source.path))))
    return build_workload(wl)


def simulate(cfg: ExperimentConfig, events: bool = False):
    """Run the config once (ignoring its sweep) and return the report."""
    trajs = _workload_for(cfg)
    params = replace(cfg.sim, record_events=events or cfg.sim.record_events)
    if cfg.mode == "offline":
        if not isinstance(cfg.workload.arrival, AllAtZero):
            raise ConfigError("offline mode starts every agent at t=0; drop workload.arrival")
        return run_offline(cfg.cluster, trajs, cfg.policy, cfg.scheduler, cfg.calibration, params)
    arr = cfg.workload.arrival
    if not isinstance(arr, Poisson):
        raise ConfigError("online mode needs workload.arrival: {poisson: {rate: ...}}")
    return run_online(cfg.cluster, trajs, arr.rate, cfg.online, arr.seed, cfg.policy,
                      cfg.scheduler, cfg.calibration, params)


def summary_row(report) -> Dict[str, Any]:
    d = report.to_dict()
    if "offline" in d:
        return {"jct_s": d["offline"]["jct_s"]}
    on = d["online"]
    return {"jct_s": on["mean_jct_s"], "ttft_mean": on["ttft"]["mean"],
            "ttft_p50": on["ttft"]["p50"], "ttft_p99": on["ttft"]["p99"],
            "ttst_mean": on["ttst"]["mean"], "tpot_mean": on["tpot"]["mean"],
            "stop_reason": on["stop_reason"]}


def _run_cell(args) -> Dict[str, Any]:
    cfg, cell, events = args
    try:
        rep = simulate(with_cell(cfg, cell), events)
    except (ConfigurationError, ConfigError, ValidationError) as exc:
        return {"cell": cell, "status": "infeasible", "error": str(exc)}
    except SimulationError as exc:
        return {"cell": cell, "status": "simulation_error", "error": str(exc)}
    return {"cell": cell, "status": "ok", "report": rep.to_dict(), "summary": summary_row(rep),
            "util_csv": rep.utilization_csv(), "events": rep.event_log() if events else None}


def run_experiment(cfg: ExperimentConfig, out_dir, jobs: int = 1,
                   events: bool = False) -> List[Dict[str, Any]]:
    """Execute the sweep; returns per-cell results in grid order."""
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dumps())
    cells = grid(cfg)
    work = [(cfg, c, events) for c in cells]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, work))
    else:
        results = [_run_cell(w) for w in work]
    axes = [a for a in SWEEP_AXES if a in cfg.sweep]
    rows = []
    for i, res in enumerate(results):
        name = cell_name(i, res["cell"])
        res["name"] = name
        body = {"cell": res["cell"], "status": res["status"]}
        if res["status"] == "ok":
            body.update(res["report"])
            (out / "cells" / f"{name}.util.csv").write_text(res["util_csv"])
            if res["events"] is not None:
                (out / "cells" / f"{name}.events.jsonl").write_text(res["events"])
            rows.append({"cell": name, **res["cell"],
                         **{k: res["summary"].get(k, "") for k in SUMMARY_STATS}})
        else:
            body["error"] = res["error"]
            log.warning("cell %s failed: %s", name, res["error"])
        (out / "cells" / f"{name}.json").write_text(json.dumps(body, indent=1, sort_keys=True))
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, ["cell", *axes, *SUMMARY_STATS], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    return results
