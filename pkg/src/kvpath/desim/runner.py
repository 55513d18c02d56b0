"""Entry points: offline batch replay, online Poisson arrivals, and
single-request traces of the prefill and decode dataflows."""

from __future__ import annotations

import csv
import json
import io
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .. import metrics
from ..model import ClusterConfig, ReadPath, RequestState, Trajectory
from ..scheduler import SchedulerParams
from ..workload import poisson_arrivals
from .cluster import ClusterSim, DecisionRecord, FlowRecord, ForwardRecord
from .params import Calibration, Policy, SimParams

STORAGE_NIC_GROUPS = ("pe_snic_rx", "de_snic_rx")


def resolve_scheduler(config: ClusterConfig, sched: Optional[SchedulerParams],
                      params: SimParams) -> SchedulerParams:
    """Fill in alpha/beta when unset.

    alpha is ``alpha_seconds`` of one node's storage read bandwidth, in
    tokens. beta is ``beta_seconds`` of one PE's share of all storage
    bandwidth the prefill side can draw on (both sides with dual-path).
    """
    sched = sched or SchedulerParams()
    kv = config.kv_bytes_per_token
    alpha = sched.alpha
    if alpha is None:
        alpha = params.alpha_seconds * config.storage_bw / kv
    beta = sched.beta
    if beta is None:
        nodes = config.P + config.D if params.uses_dual_path else config.P
        beta = params.beta_seconds * nodes * config.storage_bw / (config.n_pe * kv)
    return replace(sched, alpha=alpha, beta=beta)


def _resolve(config, sched, calib, params):
    params = params or SimParams()
    calib = calib or Calibration.load()
    return resolve_scheduler(config, sched, params), calib, params


@dataclass
class RequestRecord:
    request_id: str
    trajectory_id: str
    round_index: int
    cached: int
    append: int
    gen: int
    pe: Optional[int]
    de: Optional[int]
    path: Optional[str]
    arrival: float
    pe_assigned: Optional[float]
    de_assigned: Optional[float]
    read_done: Optional[float]
    first_token: Optional[float]
    second_token: Optional[float]
    completion: Optional[float]
    ledger: Dict[str, int]

    @property
    def done(self) -> bool:
        return self.completion is not None

    def latency(self) -> metrics.LatencyRecord:
        return metrics.latency_record(self.request_id, self.arrival, self.first_token,
                                      self.second_token, self.completion, self.gen)

    def breakdown(self) -> metrics.TTFTBreakdown:
        return metrics.ttft_breakdown(self.arrival, self.pe_assigned, self.de_assigned,
                                      self.read_done, self.first_token)


@dataclass
class SimReport:
    """Results shared by offline and online runs."""

    config: ClusterConfig
    policy: str
    end_time: float
    requests: List[RequestRecord]
    trajectory_jct: Dict[str, float]
    decisions: List[DecisionRecord]
    forwards: List[ForwardRecord]
    utilization: List[Tuple[int, str, float]]
    resource_groups: Dict[str, str]
    bucket: float
    events: List[dict] = field(default_factory=list)
    event_count: int = 0
    capacities: Dict[str, float] = field(default_factory=dict)
    # (engine, start, end) of each high-priority burst
    bursts: List[Tuple[str, float, float]] = field(default_factory=list)

    @property
    def completed(self) -> List[RequestRecord]:
        return [r for r in self.requests if r.done]

    def group_rates(self, group: str, t0: float, t1: float) -> Dict[str, float]:
        """Mean bytes/s of each resource in ``group`` over [t0, t1)."""
        k0, k1 = int(round(t0 / self.bucket)), int(round(t1 / self.bucket))
        ids = [rid for rid, g in self.resource_groups.items() if g == group]
        per = {rid: 0.0 for rid in ids}
        caps = self.capacities
        for k, rid, u in self.utilization:
            if rid in per and k0 <= k < k1:
                per[rid] += u * caps[rid] * self.bucket
        span = max(k1 - k0, 1) * self.bucket
        return {rid: v / span for rid, v in per.items()}

    def storage_balance(self, t1: Optional[float] = None) -> List[Tuple[float, Optional[float]]]:
        """Per-bucket max/avg storage-read traffic across all storage NICs."""
        ids = sorted(rid for rid, g in self.resource_groups.items() if g in STORAGE_NIC_GROUPS)
        samples = {rid: [] for rid in ids}
        caps = self.capacities
        for k, rid, u in self.utilization:
            if rid in samples:
                samples[rid].append((k * self.bucket, u * caps[rid] * self.bucket))
        end = self.end_time if t1 is None else t1
        return metrics.load_balance_ratio(samples, self.bucket, 0.0, end)

    def attention_balance(self, t1: Optional[float] = None) -> List[Tuple[float, Optional[float]]]:
        """max/avg attention time across the DP ranks of each forward."""
        return [(f.time, metrics.max_avg(f.attention)) for f in self.forwards
                if t1 is None or f.time < t1]

    def balance(self) -> List[dict]:
        out = [{"t": t, "resource_class": "storage_nic", "max_avg": r}
               for t, r in self.storage_balance() if r is not None]
        out += [{"t": t, "resource_class": "attention", "max_avg": r}
                for t, r in self.attention_balance() if r is not None]
        return out

    def utilization_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_bucket", "resource_id", "utilization_fraction"])
        for k, rid, u in self.utilization:
            w.writerow([k, rid, repr(u)])
        return buf.getvalue()

    def event_log(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.events)


@dataclass
class OfflineReport(SimReport):
    @property
    def jct(self) -> float:
        return max(self.trajectory_jct.values(), default=0.0)

    def to_dict(self) -> dict:
        return {"offline": {"jct_s": self.jct}, "balance": self.balance(),
                "requests": len(self.requests), "events": self.event_count}


@dataclass
class OnlineReport(SimReport):
    aps: float = 0.0
    stop_reason: str = ""
    steady_state: bool = False

    def latencies(self) -> List[metrics.LatencyRecord]:
        return [r.latency() for r in self.completed]

    @property
    def mean_ttft(self) -> Optional[float]:
        return metrics.summarize(x.ttft for x in self.latencies())["mean"]

    @property
    def mean_jct(self) -> Optional[float]:
        v = list(self.trajectory_jct.values())
        return sum(v) / len(v) if v else None

    def to_dict(self) -> dict:
        lat = self.latencies()
        return {
            "online": {
                "aps": self.aps,
                "ttft": metrics.summarize(x.ttft for x in lat),
                "ttst": metrics.summarize(x.ttst for x in lat),
                "tpot": metrics.summarize(x.tpot for x in lat),
                "steady_state": self.steady_state,
                "stop_reason": self.stop_reason,
                "mean_jct_s": self.mean_jct,
            },
            "balance": self.balance(),
            "requests": len(self.requests),
            "events": self.event_count,
        }


def _collect(sim: ClusterSim, cls, **extra) -> SimReport:
    recs = []
    for r in sim.requests:
        traj = sim.trajs[sim.agent_traj[r.agent]]
        recs.append(RequestRecord(
            r.rid, traj.id, r.round, r.cached, r.append, r.gen,
            r.pe.id if r.pe else None, r.de.id if r.de else None,
            r.path.value if r.path else None, r.arrival, r.pe_assigned, r.de_assigned,
            r.read_done, r.first_token, r.second_token, r.completion, dict(r.ledger)))
    jct = {}
    for agent, t in sorted(sim.agent_done.items()):
        jct[f"{agent}:{sim.trajs[sim.agent_traj[agent]].id}"] = t - sim.arrivals[agent]
    net = sim.net
    util = []
    for res in net.resources:
        for k in sorted(net.series[res.index]):
            v = net.series[res.index][k]
            if v > 0:
                util.append((k, res.id, v / (res.capacity * net.bucket)))
    util.sort()
    rep = cls(sim.cfg, sim.p.policy.value, sim.now, recs, jct, sim.decisions, sim.forwards, util,
              {r.id: r.group for r in net.resources}, net.bucket, sim.log.records, sim.events,
              {r.id: r.capacity for r in net.resources}, list(sim.bursts), **extra)
    return rep


def run_offline(config: ClusterConfig, trajectories: Sequence[Trajectory],
                policy: Policy = Policy.DUAL_PATH, sched: Optional[SchedulerParams] = None,
                calib: Optional[Calibration] = None, params: Optional[SimParams] = None,
                initial_context: Optional[Sequence[int]] = None) -> OfflineReport:
    """All trajectories start at t=0; JCT is when the last one finishes."""
    params = replace(params or SimParams(), policy=Policy(policy))
    sched, calib, params = _resolve(config, sched, calib, params)
    sim = ClusterSim(config, sched, calib, params, trajectories,
                     initial_context=initial_context)
    sim.run()
    return _collect(sim, OfflineReport)


@dataclass(frozen=True)
class OnlineLimits:
    ttft: float = 4.0
    tpot: float = 0.05
    horizon: float = 600.0
    monitor_interval: float = 1.0
    # Window used both for the SLO check and the steady-state rule.
    window: float = 15.0
    lookback: float = 180.0
    threshold: float = 0.05
    detect_steady: bool = True


def _online_monitor(limits: OnlineLimits):
    def check(sim: ClusterSim) -> None:
        now = sim.now
        lo = now - limits.window
        ttfts, tpots = [], []
        for r in sim.requests:
            if r.first_token is None:
                # Still waiting: its TTFT is at least its age.
                if r.arrival <= now:
                    ttfts.append(now - r.arrival)
            elif r.first_token > lo:
                ttfts.append(r.first_token - r.arrival)
            if r.completion is not None and r.completion > lo and r.gen >= 2:
                tpots.append((r.completion - r.first_token) / (r.gen - 1))
        if ttfts and sum(ttfts) / len(ttfts) > limits.ttft:
            sim.stop("slo")
            return
        if tpots and sum(tpots) / len(tpots) > limits.tpot:
            sim.stop("slo")
            return
        if limits.detect_steady:
            series = sorted((r.first_token, r.first_token - r.arrival)
                            for r in sim.requests if r.first_token is not None)
            if metrics.detect_steady_state(series, limits.window, limits.lookback,
                                           limits.threshold, now=now):
                sim.stop("steady")
                return
        if now >= limits.horizon:
            sim.stop("horizon")
    return check


def run_online(config: ClusterConfig, trajectories: Sequence[Trajectory], aps: float,
               limits: OnlineLimits = OnlineLimits(), seed: int = 0,
               policy: Policy = Policy.DUAL_PATH, sched: Optional[SchedulerParams] = None,
               calib: Optional[Calibration] = None, params: Optional[SimParams] = None
               ) -> OnlineReport:
    """Agents arrive as a Poisson process and replay trajectories back-to-back.

    Agent k replays trajectory k mod len(trajectories). The run stops on an
    SLO violation, on steady state, or at the horizon.
    """
    if not aps > 0:
        raise ValueError("aps must be > 0")
    params = replace(params or SimParams(), policy=Policy(policy))
    sched, calib, params = _resolve(config, sched, calib, params)
    arrivals = poisson_arrivals(aps, limits.horizon, seed)
    n = len(trajectories)
    trajs = [trajectories[k % n] for k in range(len(arrivals))]
    sim = ClusterSim(config, sched, calib, params, trajs, arrivals=arrivals)
    sim.monitor = _online_monitor(limits)
    sim.monitor_interval = limits.monitor_interval
    sim.run()
    reason = sim.stop_reason or "drained"
    return _collect(sim, OnlineReport, aps=aps, stop_reason=reason,
                    steady_state=reason == "steady")


# ------------------------------------------------------- single-request traces
@dataclass
class RequestTrace:
    flows: List[FlowRecord]
    layer_done: List[Tuple[str, int, float]]
    tokens: List[Tuple[str, int, float]]
    ledger: Dict[str, int]
    record: RequestRecord
    events: List[dict]

    def flows_with(self, label: str) -> List[FlowRecord]:
        return [f for f in self.flows if f.stage_label == label]

    def bytes_of(self, label: str) -> int:
        return sum(f.bytes for f in self.flows_with(label))

    @property
    def persisted(self) -> List[FlowRecord]:
        return self.flows_with("persist")


def _single(request: RequestState, config: ClusterConfig, path: ReadPath,
            calib: Optional[Calibration], params: Optional[SimParams],
            sched: Optional[SchedulerParams]) -> RequestTrace:
    params = replace(params or SimParams(), record_events=True)
    sched, calib, params = _resolve(config, sched, calib, params)
    traj = Trajectory.from_pairs(request.trajectory_id or "r",
                                 [(request.append_len, request.gen_target)])
    sim = ClusterSim(config, sched, calib, params, [traj], forced_path=path,
                     initial_context=[request.cached_len])
    sim.record_flows = True
    sim.run()
    rep = _collect(sim, OfflineReport)
    rec = rep.requests[0]
    return RequestTrace(sorted(sim.flow_log, key=lambda f: (f.end, f.start)), sim.layer_done,
                        sim.token_times, rec.ledger, rec, sim.log.records)


def execute_prefill_pe_path(request: RequestState, config: ClusterConfig,
                            calib: Optional[Calibration] = None,
                            params: Optional[SimParams] = None,
                            sched: Optional[SchedulerParams] = None) -> RequestTrace:
    """Run one request on an idle cluster, reading its hit KV on the PE side."""
    return _single(request, config, ReadPath.PE, calib, params, sched)


def execute_prefill_de_path(request: RequestState, config: ClusterConfig,
                            calib: Optional[Calibration] = None,
                            params: Optional[SimParams] = None,
                            sched: Optional[SchedulerParams] = None) -> RequestTrace:
    """Run one request on an idle cluster, reading its hit KV on the DE side."""
    return _single(request, config, ReadPath.DE, calib, params, sched)


def execute_decode(request: RequestState, config: ClusterConfig,
                   calib: Optional[Calibration] = None, params: Optional[SimParams] = None,
                   sched: Optional[SchedulerParams] = None) -> RequestTrace:
    """Run one request end to end; the decode part is in ``tokens`` and ``persisted``."""
    path = request.read_path or ReadPath.PE
    return _single(request, config, path, calib, params, sched)
