"""Experiment configuration: one YAML document, every default embedded.

Bandwidths accept plain numbers (bytes/s) or strings such as ``400Gbps``,
``50GB/s`` or ``1.5TB/s``; sizes accept ``80GB``, ``512MiB`` and so on.
Everything is converted to bytes at parse time.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .desim.params import BurstSpec, Calibration, Policy, SimParams
from .desim.runner import OnlineLimits
from .model import ClusterConfig
from .scheduler import SchedulerParams
from .workload import AllAtZero, Poisson, Synthetic, TraceFile, WorkloadSpec


class ConfigError(ValueError):
    pass


_PREFIX = {"": 1, "k": 1e3, "m": 1e6, "g": 1e9, "t": 1e12,
           "ki": 2 ** 10, "mi": 2 ** 20, "gi": 2 ** 30, "ti": 2 ** 40}
_QTY = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([kKmMgGtT]i?)?(bps|b/s|B/s|Bps|B|b)?\s*$")


def parse_quantity(value, what: str = "value", rate: bool = False) -> float:
    """Bytes (or bytes/s when ``rate``) from a number or a unit string."""
    if isinstance(value, bool):
        raise ConfigError(f"{what}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    m = _QTY.match(str(value))
    if not m:
        raise ConfigError(f"{what}: cannot parse quantity {value!r}")
    num, prefix, unit = m.groups()
    x = float(num) * _PREFIX[(prefix or "").lower()]
    unit = unit or ""
    if rate and unit in ("B", "b"):
        raise ConfigError(f"{what}: {value!r} is a size, expected a rate")
    if not rate and unit not in ("", "B", "b"):
        raise ConfigError(f"{what}: {value!r} is a rate, expected a size")
    if unit in ("bps", "b/s", "b"):
        x /= 8
    return x


_RATE_FIELDS = {"cnic_bw", "dram_bw"}
_SIZE_FIELDS = {"pe_buffer_bytes", "de_buffer_bytes"}


def _strict(cls, data: Optional[dict], where: str) -> dict:
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return data


def _build(cls, data, where: str, **convert):
    data = _strict(cls, data, where)
    for k, fn in convert.items():
        if k in data and data[k] is not None:
            data[k] = fn(data[k])
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def cluster_from_dict(d) -> ClusterConfig:
    d = _strict(ClusterConfig, d, "cluster")
    for k in _RATE_FIELDS & set(d):
        d[k] = parse_quantity(d[k], f"cluster.{k}", rate=True)
    for k in _SIZE_FIELDS & set(d):
        d[k] = parse_quantity(d[k], f"cluster.{k}")
    return _build(ClusterConfig, d, "cluster")


def _workload(d) -> WorkloadSpec:
    d = dict(d or {})
    src = d.pop("source", None) or {"synthetic": {}}
    if not isinstance(src, dict) or len(src) != 1:
        raise ConfigError("workload.source: give exactly one of 'synthetic' or 'trace'")
    (kind, body), = src.items()
    if kind == "synthetic":
        body = {**DEFAULT_SYNTHETIC, **(body or {})}
        source = _build(Synthetic, body, "workload.source.synthetic")
    elif kind == "trace":
        path = body if isinstance(body, str) else (body or {}).get("path")
        if not path:
            raise ConfigError("workload.source.trace: missing path")
        source = TraceFile(str(path))
    else:
        raise ConfigError(f"workload.source: unknown kind {kind!r}")
    arr = d.pop("arrival", None) or "all_at_zero"
    if arr == "all_at_zero":
        arrival = AllAtZero()
    elif isinstance(arr, dict) and set(arr) == {"poisson"}:
        arrival = _build(Poisson, arr["poisson"], "workload.arrival.poisson")
    else:
        raise ConfigError("workload.arrival: 'all_at_zero' or {poisson: {rate, seed}}")
    rest = _strict(WorkloadSpec, d, "workload")
    try:
        return WorkloadSpec(source, arrival, **rest)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"workload: {exc}") from exc


def _sim(d) -> SimParams:
    d = dict(d or {})
    bursts = d.pop("bursts", None)
    if bursts is not None:
        d["bursts"] = _build(BurstSpec, bursts, "sim.bursts")
    if "policy" in d:
        raise ConfigError("sim.policy: set the top-level 'policy' key instead")
    return _build(SimParams, d, "sim")


def _calibration(d) -> Calibration:
    if d is None:
        return Calibration.load()
    if isinstance(d, str):
        try:
            return Calibration.load(d)
        except OSError as exc:
            raise ConfigError(f"calibration: {exc}") from exc
    try:
        return Calibration.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"calibration: {exc}") from exc


SWEEP_AXES = ("policy", "agents", "max_len", "pd", "append_scale", "gen_scale", "aps")
_PD = re.compile(r"^(\d+)P(\d+)D$")


def parse_pd(v) -> tuple:
    m = _PD.match(str(v))
    if not m:
        raise ConfigError(f"sweep.pd: expected e.g. '2P1D', got {v!r}")
    return int(m.group(1)), int(m.group(2))


@dataclass(frozen=True)
class ExperimentConfig:
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    scheduler: SchedulerParams = field(default_factory=SchedulerParams)
    sim: SimParams = field(default_factory=SimParams)
    calibration: Calibration = field(default_factory=Calibration.load)
    workload: WorkloadSpec = field(default_factory=lambda: WorkloadSpec(
        Synthetic(**DEFAULT_SYNTHETIC)))
    policy: Policy = Policy.DUAL_PATH
    mode: str = "offline"
    online: OnlineLimits = field(default_factory=OnlineLimits)
    seed: int = 0
    sweep: Dict[str, List[Any]] = field(default_factory=dict)
    base_dir: str = "."

    def __post_init__(self):
        if self.mode not in ("offline", "online"):
            raise ConfigError("mode must be 'offline' or 'online'")
        for k, v in self.sweep.items():
            if k not in SWEEP_AXES:
                raise ConfigError(f"sweep: unknown axis {k!r}; known: {list(SWEEP_AXES)}")
            if not isinstance(v, list) or not v:
                raise ConfigError(f"sweep.{k}: must be a non-empty list")
        if "aps" in self.sweep and self.mode != "online":
            raise ConfigError("sweep.aps needs mode: online")

    @classmethod
    def from_dict(cls, d: Optional[dict], base_dir=".") -> "ExperimentConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown top-level keys {unknown}")
        try:
            policy = Policy(d.get("policy", Policy.DUAL_PATH.value))
        except ValueError:
            raise ConfigError(f"policy: expected one of {[p.value for p in Policy]}") from None
        sweep = d.get("sweep") or {}
        if not isinstance(sweep, dict):
            raise ConfigError("sweep: expected a mapping of axis -> list")
        for v in sweep.get("policy", []):
            try:
                Policy(v)
            except ValueError:
                raise ConfigError(f"sweep.policy: unknown policy {v!r}") from None
        for v in sweep.get("pd", []):
            parse_pd(v)
        return cls(
            cluster=cluster_from_dict(d.get("cluster")),
            scheduler=_build(SchedulerParams, d.get("scheduler"), "scheduler"),
            sim=_sim(d.get("sim")),
            calibration=_calibration(d.get("calibration")),
            workload=_workload(d.get("workload")),
            policy=policy,
            mode=d.get("mode", "offline"),
            online=_build(OnlineLimits, d.get("online"), "online"),
            seed=int(d.get("seed", 0)),
            sweep={k: list(v) if isinstance(v, (list, tuple)) else v for k, v in sweep.items()},
            base_dir=str(base_dir),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data, base_dir=path.parent)

    def to_dict(self) -> dict:
        """Plain-data snapshot; loading it back gives an equal config."""
        src = self.workload.source
        source = ({"trace": {"path": src.path}} if isinstance(src, TraceFile)
                  else {"synthetic": asdict(src)})
        arr = self.workload.arrival
        arrival = "all_at_zero" if isinstance(arr, AllAtZero) else {"poisson": asdict(arr)}
        sim = asdict(self.sim)
        sim.pop("policy")
        cal = asdict(self.calibration)
        if cal["decode_attention"] is None:
            cal.pop("decode_attention")
        return {
            "cluster": asdict(self.cluster),
            "scheduler": asdict(self.scheduler),
            "sim": sim,
            "calibration": cal,
            "workload": {"source": source, "arrival": arrival,
                         "append_scale": self.workload.append_scale,
                         "gen_scale": self.workload.gen_scale,
                         "max_len": self.workload.max_len,
                         "agents": self.workload.agents},
            "policy": self.policy.value,
            "mode": self.mode,
            "online": asdict(self.online),
            "seed": self.seed,
            "sweep": dict(self.sweep),
        }

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def resolve_path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q


# Defaults mirror the 64K agent dataset, scaled to a handful of agents.
DEFAULT_SYNTHETIC = {"max_len": 65536, "mean_turns": 157, "mean_append": 429,
                     "mean_gen": 176, "count": 16, "seed": 0}


def defaults_yaml() -> str:
    return ExperimentConfig().dumps()


def with_cell(cfg: ExperimentConfig, cell: Dict[str, Any]) -> ExperimentConfig:
    """Apply one sweep cell's axis values to the base config."""
    out = cfg
    wl = out.workload
    for axis, v in cell.items():
        if axis == "policy":
            out = replace(out, policy=Policy(v))
        elif axis == "pd":
            p, d = parse_pd(v)
            out = replace(out, cluster=replace(out.cluster, prefill_nodes=p, decode_nodes=d))
        elif axis == "agents":
            if isinstance(wl.source, Synthetic):
                wl = replace(wl, source=replace(wl.source, count=int(v)))
            else:
                wl = replace(wl, agents=int(v))
        elif axis == "max_len":
            if isinstance(wl.source, Synthetic):
                wl = replace(wl, source=replace(wl.source, max_len=int(v)))
            else:
                wl = replace(wl, max_len=int(v))
        elif axis == "append_scale":
            wl = replace(wl, append_scale=float(v))
        elif axis == "gen_scale":
            wl = replace(wl, gen_scale=float(v))
        elif axis == "aps":
            wl = replace(wl, arrival=Poisson(float(v), out.seed))
    return replace(out, workload=wl)
