"""Discrete-event model of a PD-disaggregated cluster with dual-path KV loading.

Stage labels on flows follow the numbered steps of the two loading paths:

PE read path
    ``PE-1/2``   storage -> PE node buffer (SNIC rx, DRAM)
    ``PE-3/4``   PE buffer -> PE HBM, per layer (DRAM, CNIC read+write loopback)
    ``PE-5/6/7`` PE HBM -> DE buffer, per layer, hit + miss tokens
    ``PE-8/9``   DE buffer -> DE HBM before decode
DE read path
    ``DE-1/2``   storage -> DE node buffer
    ``DE-3/4/5`` DE buffer -> PE HBM, per layer, hit tokens
    ``DE-merge`` PE HBM -> DE buffer, per layer, miss tokens only
    ``DE-6/7``   DE buffer -> DE HBM before decode
Decode
    ``D2H``      DE HBM -> DE DRAM for each full (or final partial) block
    ``persist``  DE DRAM -> storage (SNIC tx)
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, List, Optional, Sequence, Tuple

from ..model import ClusterConfig, EngineKind, EngineSnapshot, ReadPath, RequestState, Trajectory
from ..scheduler import (
    QueueItem,
    QuotaInfeasible,
    SchedulerParams,
    build_forward_batch,
    estimate_attention_time,
    schedule_de_groups,
    schedule_de_round_robin,
    schedule_de_within_group,
    schedule_pe_fetch,
    schedule_pe_round_robin,
    select_read_path,
)
from .events import EventKind, EventLog, EventQueue
from .network import FairShare, FluidNetwork, Priority, Resource, ResourceKind, TwoClassWRR
from .params import Calibration, SimParams

LEDGER_OF_STAGE = {
    "PE-1/2": "storage_read", "DE-1/2": "storage_read",
    "PE-3/4": "pe_h2d", "DE-3/4/5": "de_to_pe",
    "PE-5/6/7": "pe_to_de", "DE-merge": "pe_to_de",
    "PE-8/9": "de_h2d", "DE-6/7": "de_h2d",
    "D2H": "d2h", "persist": "persisted",
}
LEDGER_KEYS = ("storage_read", "pe_h2d", "de_to_pe", "pe_to_de", "de_h2d", "d2h", "persisted")


class SimulationError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class _Node:
    id: int
    kind: EngineKind
    snic_rx: int
    snic_tx: int
    dram: int
    buffer_cap: float
    engines: list = field(default_factory=list)
    buffer_used: float = 0.0
    read_wait: Deque = field(default_factory=deque)
    active_reads: Dict[int, object] = field(default_factory=dict)
    queued_tokens: int = 0
    forward: Optional["_Forward"] = None

    @property
    def name(self) -> str:
        return f"node{self.id}"


@dataclass
class _Engine:
    id: int
    kind: EngineKind
    node: _Node
    cnic_r: int
    cnic_w: int
    hbm_free: int = 0
    tok: int = 0
    seq: int = 0
    ready: Deque = field(default_factory=deque)
    decoding: list = field(default_factory=list)
    joining: list = field(default_factory=list)
    stepping: bool = False

    @property
    def name(self) -> str:
        return f"{self.kind.value.lower()}{self.id}"


@dataclass
class _Req:
    rid: str
    agent: int
    round: int
    cached: int
    append: int
    gen: int
    tokens: int
    hbm_len: int
    arrival: float
    pe: Optional[_Engine] = None
    de: Optional[_Engine] = None
    path: Optional[ReadPath] = None
    pe_assigned: Optional[float] = None
    de_assigned: Optional[float] = None
    read_done: Optional[float] = None
    first_token: Optional[float] = None
    second_token: Optional[float] = None
    completion: Optional[float] = None
    reservations: List[Tuple[_Node, float]] = field(default_factory=list)
    read_flow: Optional[object] = None
    scheduled: int = 0
    prefilled: int = 0
    pending_xfers: int = 0
    compute_done: bool = False
    prefill_done: bool = False
    generated: int = 0
    ledger: Dict[str, int] = field(default_factory=lambda: dict.fromkeys(LEDGER_KEYS, 0))


@dataclass
class _Entry:
    engine: _Engine
    item: QueueItem
    first: bool
    last: bool

    @property
    def req(self) -> _Req:
        return self.item.key


@dataclass
class _Forward:
    node: _Node
    entries: List[_Entry]
    units: List[List[int]]
    start: float
    attention: Dict[int, float]
    unit: int = 0
    pending: Dict[int, int] = field(default_factory=dict)
    loaded: Dict[int, bool] = field(default_factory=dict)
    computing: bool = False
    record: Optional["ForwardRecord"] = None


@dataclass
class ForwardRecord:
    time: float
    node: int
    attention: List[float]
    tokens: List[int]
    duration: float = 0.0


@dataclass
class FlowRecord:
    request_id: Optional[str]
    stage_label: str
    bytes: int
    start: float
    end: float
    resources: Tuple[str, ...]
    layer: Optional[int] = None


@dataclass
class DecisionRecord:
    time: float
    request_id: str
    pe_id: int
    de_id: int
    path: str
    category_used: str


class ClusterSim:
    """One simulation run. Build it, call :meth:`run`, then read results."""

    def __init__(self, config: ClusterConfig, sched: SchedulerParams, calib: Calibration,
                 params: SimParams, trajectories: Sequence[Trajectory],
                 arrivals: Optional[Sequence[float]] = None, forced_path: Optional[ReadPath] = None,
                 initial_context: Optional[Sequence[int]] = None):
        self.cfg, self.sp, self.cal, self.p = config, sched, calib, params
        self.trajs = list(trajectories)
        if arrivals is None:
            arrivals = [0.0] * len(self.trajs)
        self.arrivals = list(arrivals)
        self.forced_path = forced_path
        # Tokens of each trajectory already persisted before its first round.
        self.initial_context = list(initial_context or [0] * len(self.trajs))
        self.record_flows = False
        self.flow_log: List[FlowRecord] = []
        self.layer_done: List[Tuple[str, int, float]] = []
        self.token_times: List[Tuple[str, int, float]] = []
        self.kv_layer = config.kv_bytes_per_token_per_layer
        self.L = config.n_layer
        self.q = EventQueue()
        self.net = FluidNetwork(bucket=params.bucket)
        self.log = EventLog(params.record_events)
        self.now = 0.0
        self.stopped = False
        self.stop_reason: Optional[str] = None
        self.events = 0
        self.pe_wait: Deque[_Req] = deque()
        self.de_global: List[_Req] = []
        self.private: Dict[int, List[_Req]] = {}
        self.requests: List[_Req] = []
        self.decisions: List[DecisionRecord] = []
        self.forwards: List[ForwardRecord] = []
        self.bursts: List[Tuple[str, float, float]] = []
        self.agent_traj: List[int] = []
        self.agent_done: Dict[int, float] = {}
        self.tick_pending = False
        self.rr_cursor: Dict[object, int] = {}
        self.rr_path = 0
        self.monitor: Optional[Callable[["ClusterSim"], None]] = None
        self.monitor_interval = 1.0
        self._build()
        self._validate()

    # ------------------------------------------------------------------ setup
    def _build(self) -> None:
        cfg, net = self.cfg, self.net
        wrr = TwoClassWRR(self.p.wrr_high_weight, self.p.wrr_low_weight)
        self.nodes: List[_Node] = []
        self.pes: List[_Engine] = []
        self.des: List[_Engine] = []
        n_nodes = cfg.prefill_nodes + cfg.decode_nodes
        for n in range(n_nodes):
            kind = EngineKind.PE if n < cfg.prefill_nodes else EngineKind.DE
            tag = kind.value.lower()
            rx = net.add_resource(Resource(f"node{n}.snic.rx", ResourceKind.SNIC, cfg.storage_bw,
                                           group=f"{tag}_snic_rx"))
            tx = net.add_resource(Resource(f"node{n}.snic.tx", ResourceKind.SNIC, cfg.storage_bw,
                                           group=f"{tag}_snic_tx"))
            dram = net.add_resource(Resource(f"node{n}.dram", ResourceKind.DRAM, cfg.dram_bw,
                                             group=f"{tag}_dram"))
            cap = cfg.pe_buffer_bytes if kind is EngineKind.PE else cfg.de_buffer_bytes
            node = _Node(n, kind, rx, tx, dram, cap)
            self.nodes.append(node)
            pool = self.pes if kind is EngineKind.PE else self.des
            for _ in range(cfg.gpus_per_node):
                eid = len(pool)
                name = f"{tag}{eid}"
                r = net.add_resource(Resource(f"{name}.cnic.read", ResourceKind.CNIC, cfg.cnic_bw,
                                              wrr, group=f"{tag}_cnic_read"))
                w = net.add_resource(Resource(f"{name}.cnic.write", ResourceKind.CNIC, cfg.cnic_bw,
                                              wrr, group=f"{tag}_cnic_write"))
                eng = _Engine(eid, kind, node, r, w)
                if kind is EngineKind.DE:
                    eng.hbm_free = cfg.hbm_capacity_tokens
                pool.append(eng)
                node.engines.append(eng)
        pe_nodes = [n for n in self.nodes if n.kind is EngineKind.PE]
        de_nodes = [n for n in self.nodes if n.kind is EngineKind.DE]
        k = self.p.pe_nodes_per_group or len(pe_nodes)
        self.pe_groups = [sum((n.engines for n in pe_nodes[i:i + k]), [])
                          for i in range(0, len(pe_nodes), k)]
        k = self.p.de_nodes_per_group
        self.de_groups = [sum((n.engines for n in de_nodes[i:i + k]), [])
                          for i in range(0, len(de_nodes), k)]
        self.private = {gi: [] for gi in range(len(self.de_groups))}
        self.units = ([[layer] for layer in range(self.L)] if self.p.layerwise
                      else [list(range(self.L))])

    def _validate(self) -> None:
        cfg = self.cfg
        if len(self.arrivals) != len(self.trajs):
            raise ConfigurationError("one arrival time per trajectory is required")
        kv_tok = cfg.kv_bytes_per_token
        if len(self.initial_context) != len(self.trajs):
            raise ConfigurationError("one initial context per trajectory is required")
        for t, ctx in zip(self.trajs, self.initial_context):
            for r in t.rounds:
                hbm = self._hbm_len(ctx, r.append_tokens, r.gen_tokens)
                if hbm > cfg.hbm_capacity_tokens:
                    raise ConfigurationError(
                        f"trajectory {t.id}: {hbm} tokens exceed DE HBM capacity")
                if (ctx + r.append_tokens) * kv_tok > cfg.de_buffer_bytes or \
                        ctx * kv_tok > cfg.pe_buffer_bytes:
                    raise ConfigurationError(f"trajectory {t.id}: KV exceeds staging buffer")
                if r.append_tokens > 0:
                    last = ctx + r.append_tokens - 1
                    try:
                        build_forward_batch([QueueItem(None, last, 1)], self.sp,
                                            self.cal.attention, self.L)
                    except QuotaInfeasible as exc:
                        raise ConfigurationError(str(exc)) from exc
                ctx += r.append_tokens + r.gen_tokens

    def _hbm_len(self, cached: int, append: int, gen: int) -> int:
        return cached + append + (gen if self.sp.len_includes_gen else 0)

    # ----------------------------------------------------------------- helpers
    def _at(self, t: float, kind: EventKind, fn: Callable[[], None], payload=None) -> None:
        self.q.push(t, kind, fn, payload)

    def _soon(self, fn: Callable[[], None]) -> None:
        self.q.push(self.now, EventKind.FlowComplete, fn)

    def _transfer(self, req: Optional[_Req], label: str, nbytes: int, path: Sequence[int],
                  n_wr: int, then: Callable[[], None], layer: Optional[int] = None) -> None:
        """Start a KV transfer; ``then`` runs once all bytes were delivered."""
        if req is not None and label in LEDGER_OF_STAGE:
            req.ledger[LEDGER_OF_STAGE[label]] += nbytes
        if nbytes <= 0 or self.p.oracle:
            self._soon(then)
            return
        rid = req.rid if req is not None else None

        def done(flow):
            if self.record_flows:
                self.flow_log.append(FlowRecord(
                    rid, label, nbytes, flow.started, self.now,
                    tuple(self.net.resources[i].id for i in path), layer))
            self.log.emit(self.now, "FlowComplete", rid, resource_id=self.net.resources[path[0]].id,
                          bytes=nbytes, stage_label=label)
            then()

        def start():
            f = self.net.start(nbytes, path, Priority.LOW, rid, label, done)
            if label in ("PE-1/2", "DE-1/2"):
                req.read_flow = f

        delay = self.cal.submission_overhead * n_wr / self.cal.doorbell_batch
        if delay > 0:
            self._at(self.now + delay, EventKind.FlowComplete, start)
        else:
            start()

    def _n_layer_blocks(self, tokens: int, layers: int) -> int:
        return math.ceil(tokens / self.cfg.block_size_tokens) * layers

    def read_q(self, node: _Node) -> float:
        per_tok = self.cfg.kv_bytes_per_token
        active = sum(r.read_flow.remaining for r in node.active_reads.values()
                     if r.read_flow is not None)
        # Reads still in submission delay count in full.
        pending = sum(r.cached for r in node.active_reads.values() if r.read_flow is None)
        return node.queued_tokens + pending + active / per_tok

    # ------------------------------------------------------------- arrivals
    def _arrive(self, agent: int, rnd: int, ctx: int) -> None:
        traj = self.trajs[self.agent_traj[agent]]
        r = traj.rounds[rnd]
        req = _Req(f"{agent}/{rnd}", agent, rnd, ctx, r.append_tokens, r.gen_tokens,
                   tokens=ctx + r.append_tokens + r.gen_tokens,
                   hbm_len=self._hbm_len(ctx, r.append_tokens, r.gen_tokens), arrival=self.now)
        self.requests.append(req)
        self.pe_wait.append(req)
        self.log.emit(self.now, "Arrival", req.rid)
        self._arm_tick()

    def _start_agent(self, agent: int) -> None:
        self._arrive(agent, 0, self.initial_context[self.agent_traj[agent]])

    # ---------------------------------------------------------- scheduling
    def _arm_tick(self) -> None:
        if self.tick_pending:
            return
        self.tick_pending = True
        k = math.ceil(self.now / self.p.fetch_interval - 1e-9)
        t = max(self.now, k * self.p.fetch_interval)
        self._at(t, EventKind.FetchPE, self._tick)

    def _tick(self) -> None:
        self.tick_pending = False
        progressed = self._fetch_pe()
        progressed = self._fetch_de() or progressed
        if progressed and (self.pe_wait or self.de_global or any(self.private.values())):
            self.tick_pending = True
            self._at(self.now + self.p.fetch_interval, EventKind.FetchPE, self._tick)

    def _pe_snapshot(self, e: _Engine) -> EngineSnapshot:
        return EngineSnapshot(e.id, e.node.id, EngineKind.PE, e.seq, e.tok, self.read_q(e.node))

    def _fetch_pe(self) -> bool:
        progressed = False
        for gi, group in enumerate(self.pe_groups):
            if not self.pe_wait:
                break
            self.log.emit(self.now, "FetchPE", None, group=gi)
            snaps = [self._pe_snapshot(e) for e in group]
            queue = list(self.pe_wait)
            if self.p.scheduler == "adaptive":
                out = schedule_pe_fetch(queue, snaps, self.sp, tokens_of=lambda r: r.tokens)
            else:
                out, self.rr_cursor[("pe", gi)] = schedule_pe_round_robin(
                    queue, snaps, self.sp, self.rr_cursor.get(("pe", gi), 0),
                    tokens_of=lambda r: r.tokens)
            by_id = {e.id: e for e in group}
            for a in out:
                req = self.pe_wait.popleft()
                assert req is a.request
                eng = by_id[a.pe_id]
                req.pe, req.pe_assigned = eng, self.now
                req.pe_category = a.category.name
                eng.tok += req.tokens
                eng.seq += 1
                self.de_global.append(req)
                progressed = True
        return progressed

    def _fetch_de(self) -> bool:
        self.log.emit(self.now, "FetchDE", None)
        progressed = False
        if self.de_global:
            if self.p.scheduler == "adaptive":
                # Group load counts requests already waiting in its private queue.
                sums = {g: sum(e.tok for e in grp) + sum(r.tokens for r in self.private[g])
                        for g, grp in enumerate(self.de_groups)}
                appends, _ = schedule_de_groups(self.de_global, sums,
                                                tokens_of=lambda r: r.tokens)
            else:
                appends = {g: [] for g in self.private}
                c = self.rr_cursor.get("de_group", 0)
                for r in self.de_global:
                    appends[c].append(r)
                    c = (c + 1) % len(self.de_groups)
                self.rr_cursor["de_group"] = c
            for g, rs in appends.items():
                self.private[g].extend(rs)
            self.de_global = []
            progressed = True
        per_group = []
        for gi, group in enumerate(self.de_groups):
            queue = self.private[gi]
            if not queue:
                continue
            snaps = [EngineSnapshot(e.id, e.node.id, EngineKind.DE, e.seq, e.tok,
                                    self.read_q(e.node), e.hbm_free) for e in group]
            len_of = lambda r: r.hbm_len
            if self.p.scheduler == "adaptive":
                out = schedule_de_within_group(queue, snaps, self.sp, len_of=len_of)
            else:
                out, self.rr_cursor[("de", gi)] = schedule_de_round_robin(
                    queue, snaps, self.rr_cursor.get(("de", gi), 0), len_of=len_of)
            del queue[:len(out)]
            by_id = {e.id: e for e in group}
            per_group.append([(a, by_id[a.de_id]) for a in out])
        # Groups decide independently; their picks are dispatched interleaved so
        # read-path choices see every group's reads as they accumulate.
        for k in range(max((len(x) for x in per_group), default=0)):
            for picks in per_group:
                if k >= len(picks):
                    continue
                a, eng = picks[k]
                req = a.request
                req.de, req.de_assigned = eng, self.now
                eng.hbm_free -= req.hbm_len
                eng.tok += req.tokens
                eng.seq += 1
                self._dispatch(req, a.category)
                progressed = True
        return progressed

    def _choose_path(self, req: _Req) -> ReadPath:
        if self.forced_path is not None:
            return self.forced_path
        if not self.p.uses_dual_path:
            return ReadPath.PE
        if self.p.scheduler == "round_robin":
            self.rr_path += 1
            return ReadPath.PE if self.rr_path % 2 == 1 else ReadPath.DE
        return select_read_path(self.read_q(req.pe.node), self.read_q(req.de.node))

    def _dispatch(self, req: _Req, de_category: str) -> None:
        req.path = self._choose_path(req)
        rec = DecisionRecord(self.now, req.rid, req.pe.id, req.de.id, req.path.value,
                             f"{getattr(req, 'pe_category', '')}/{de_category}")
        self.decisions.append(rec)
        self.log.emit(self.now, "Decision", req.rid, pe_id=rec.pe_id, de_id=rec.de_id,
                      path=rec.path, category_used=rec.category_used)
        kv_tok = self.cfg.kv_bytes_per_token
        prompt_bytes = (req.cached + req.append) * kv_tok
        if req.path is ReadPath.PE:
            node = req.pe.node
            req.reservations = [(req.pe.node, req.cached * kv_tok), (req.de.node, prompt_bytes)]
        else:
            node = req.de.node
            req.reservations = [(req.de.node, prompt_bytes)]
        if self.p.oracle:
            req.reservations = []
        node.read_wait.append(req)
        node.queued_tokens += req.cached
        self._try_reads(node)

    # ------------------------------------------------------------ storage reads
    def _try_reads(self, node: _Node) -> None:
        while node.read_wait:
            req = node.read_wait[0]
            if req.cached > 0 and not self.p.oracle and \
                    len(node.active_reads) >= self.p.read_concurrency:
                break
            need: Dict[int, float] = {}
            for n, b in req.reservations:
                need[n.id] = need.get(n.id, 0.0) + b
            if any(self.nodes[n].buffer_used + b > self.nodes[n].buffer_cap
                   for n, b in need.items()):
                break
            for n, b in req.reservations:
                n.buffer_used += b
            node.read_wait.popleft()
            node.queued_tokens -= req.cached
            nbytes = req.cached * self.cfg.kv_bytes_per_token
            if nbytes == 0 or self.p.oracle:
                if nbytes:
                    req.ledger["storage_read"] += nbytes
                self._soon(lambda req=req: self._read_done(req, None))
                continue
            label = "PE-1/2" if req.path is ReadPath.PE else "DE-1/2"
            node.active_reads[id(req)] = req
            self._transfer(req, label, nbytes, (node.snic_rx, node.dram),
                           math.ceil(req.cached / self.cfg.block_size_tokens),
                           lambda req=req, node=node: self._read_done(req, node))

    def _release_buffers(self, req: _Req, which: Optional[_Node] = None) -> None:
        keep = []
        for n, b in req.reservations:
            if which is None or n is which:
                n.buffer_used -= b
            else:
                keep.append((n, b))
        req.reservations = keep
        for n in self.nodes:
            if n.read_wait:
                self._try_reads(n)

    def _read_done(self, req: _Req, node: Optional[_Node]) -> None:
        req.read_done = self.now
        if node is not None:
            node.active_reads.pop(id(req), None)
            req.read_flow = None
            self._try_reads(node)
        req.pe.ready.append(QueueItem(req, req.cached, req.append))
        self._try_forward(req.pe.node)

    # ------------------------------------------------------------ prefill
    def _try_forward(self, node: _Node) -> None:
        if node.forward is not None or self.stopped:
            return
        max_tokens = self.cfg.hbm_capacity_tokens * (self.L if self.p.layerwise else 1)
        entries: List[_Entry] = []
        attention: Dict[int, float] = {}
        for eng in node.engines:
            if not eng.ready:
                continue
            batch = build_forward_batch(list(eng.ready), self.sp, self.cal.attention, self.L,
                                        max_tokens=max_tokens)
            for item in batch.entries:
                head = eng.ready[0]
                assert head.key is item.key
                if item.bsz == head.bsz:
                    eng.ready.popleft()
                else:
                    eng.ready[0] = QueueItem(head.key, head.cached + item.bsz, head.bsz - item.bsz)
                req = item.key
                first = req.scheduled == 0
                req.scheduled += item.bsz
                entries.append(_Entry(eng, item, first, req.scheduled == req.append))
            if batch.entries:
                attention[eng.id] = estimate_attention_time(
                    [(e.cached, e.bsz) for e in batch.entries], self.cal.attention)
        if not entries:
            return
        fwd = _Forward(node, entries, self.units, self.now, attention)
        node.forward = fwd
        fwd.record = ForwardRecord(
            self.now, node.id, [attention.get(e.id, 0.0) for e in node.engines],
            [sum(x.item.bsz for x in entries if x.engine is e) for e in node.engines])
        self.forwards.append(fwd.record)
        self._load_unit(fwd, 0)

    def _load_unit(self, fwd: _Forward, u: int) -> None:
        nl = len(fwd.units[u])
        fwd.pending[u] = 0
        for ent in fwd.entries:
            req = ent.req
            if not ent.first or req.cached == 0:
                continue
            nbytes = req.cached * self.kv_layer * nl
            n_wr = self._n_layer_blocks(req.cached, nl)
            if req.path is ReadPath.PE:
                path, label = (fwd.node.dram, ent.engine.cnic_r, ent.engine.cnic_w), "PE-3/4"
            else:
                path, label = (req.de.node.dram, req.de.cnic_r, ent.engine.cnic_w), "DE-3/4/5"
            fwd.pending[u] += 1
            self._transfer(req, label, nbytes, path, n_wr, lambda: self._unit_loaded(fwd, u),
                           layer=fwd.units[u][0] if nl == 1 else None)
        if fwd.pending[u] == 0:
            fwd.loaded[u] = True
            self._maybe_compute(fwd)

    def _unit_loaded(self, fwd: _Forward, u: int) -> None:
        fwd.pending[u] -= 1
        if fwd.pending[u] == 0:
            fwd.loaded[u] = True
            self._maybe_compute(fwd)

    def _layer_time(self, fwd: _Forward) -> float:
        attn = max(fwd.attention.values(), default=0.0)
        tokens = sum(e.item.bsz for e in fwd.entries)
        g = self.cfg.gpus_per_node
        return attn + self.cal.ffn_layer_constant + self.cal.ffn_per_token * tokens / g

    def _maybe_compute(self, fwd: _Forward) -> None:
        u = fwd.unit
        if fwd.computing or not fwd.loaded.get(u):
            return
        fwd.computing = True
        if self.p.layerwise and u + 1 < len(fwd.units) and u + 1 not in fwd.pending:
            self._load_unit(fwd, u + 1)
        dur = self._layer_time(fwd) * len(fwd.units[u])
        self._at(self.now + dur, EventKind.LayerDone, lambda: self._unit_done(fwd, u))

    def _unit_done(self, fwd: _Forward, u: int) -> None:
        fwd.computing = False
        layers = fwd.units[u]
        nl = len(layers)
        for ent in fwd.entries:
            req = ent.req
            for layer in layers:
                self.log.emit(self.now, "LayerDone", req.rid, layer=layer)
                if self.record_flows:
                    self.layer_done.append((req.rid, layer, self.now))
            if req.path is ReadPath.PE:
                tokens = ent.item.bsz + (req.cached if ent.first else 0)
                label = "PE-5/6/7"
            else:
                tokens, label = ent.item.bsz, "DE-merge"
            if tokens > 0:
                req.pending_xfers += 1
                self._transfer(req, label, tokens * self.kv_layer * nl,
                               (ent.engine.cnic_r, req.de.cnic_w, req.de.node.dram),
                               self._n_layer_blocks(tokens, nl),
                               lambda req=req: self._xfer_done(req),
                               layer=layers[0] if nl == 1 else None)
        fwd.unit += 1
        if fwd.unit < len(fwd.units):
            self._maybe_compute(fwd)
        else:
            self._finish_forward(fwd)

    def _finish_forward(self, fwd: _Forward) -> None:
        node = fwd.node
        node.forward = None
        fwd.record.duration = self.now - fwd.start
        released = False
        for ent in fwd.entries:
            req = ent.req
            req.prefilled += ent.item.bsz
            if ent.first and req.path is ReadPath.PE and req.reservations:
                keep = [(n, b) for n, b in req.reservations if n is not node]
                for n, b in req.reservations:
                    if n is node:
                        n.buffer_used -= b
                req.reservations = keep
                released = True
            if ent.last:
                req.compute_done = True
                self._check_prefill(req)
        if released:
            for n in self.nodes:
                if n.read_wait:
                    self._try_reads(n)
        self._try_forward(node)

    def _xfer_done(self, req: _Req) -> None:
        req.pending_xfers -= 1
        self._check_prefill(req)

    def _check_prefill(self, req: _Req) -> None:
        if req.prefill_done or not req.compute_done or req.pending_xfers:
            return
        req.prefill_done = True
        req.pe.tok -= req.tokens
        req.pe.seq -= 1
        self._arm_tick()
        tokens = req.cached + req.append
        label = "PE-8/9" if req.path is ReadPath.PE else "DE-6/7"
        de = req.de
        self._transfer(req, label, tokens * self.cfg.kv_bytes_per_token,
                       (de.node.dram, de.cnic_r, de.cnic_w), self._n_layer_blocks(tokens, self.L),
                       lambda: self._h2d_done(req))

    def _h2d_done(self, req: _Req) -> None:
        self._release_buffers(req)
        req.de.joining.append(req)
        self._try_step(req.de)

    # ------------------------------------------------------------- decode
    def _try_step(self, de: _Engine) -> None:
        if de.stepping or self.stopped:
            return
        if de.joining:
            de.decoding.extend(de.joining)
            de.joining = []
        if not de.decoding:
            return
        pairs = [(r.cached + r.append + r.generated, 1) for r in de.decoding]
        dt = self.L * estimate_attention_time(pairs, self.cal.decode_model) + \
            self.cal.decode_step_overhead
        de.stepping = True
        self._at(self.now + dt, EventKind.TokenEmitted, lambda: self._step_done(de))

    def _step_done(self, de: _Engine) -> None:
        de.stepping = False
        block = self.cfg.block_size_tokens
        still = []
        for r in de.decoding:
            r.generated += 1
            if r.generated == 1:
                r.first_token = self.now
            elif r.generated == 2:
                r.second_token = self.now
            self.log.emit(self.now, "TokenEmitted", r.rid, index=r.generated)
            if self.record_flows:
                self.token_times.append((r.rid, r.generated, self.now))
            if r.generated % block == 0:
                self._persist(r, block)
            if r.generated == r.gen:
                if r.gen % block:
                    self._persist(r, r.gen % block)
                self._complete(r)
            else:
                still.append(r)
        de.decoding = still
        self._try_step(de)

    def _persist(self, req: _Req, tokens: int) -> None:
        de = req.de
        nbytes = tokens * self.cfg.kv_bytes_per_token

        def written():
            self.log.emit(self.now, "BlockPersisted", req.rid, bytes=nbytes)

        def staged():
            self._transfer(req, "persist", nbytes, (de.node.dram, de.node.snic_tx),
                           1, written)

        self._transfer(req, "D2H", nbytes, (de.cnic_r, de.cnic_w, de.node.dram),
                       self.L, staged)

    def _complete(self, req: _Req) -> None:
        req.completion = self.now
        de = req.de
        de.hbm_free += req.hbm_len
        de.tok -= req.tokens
        de.seq -= 1
        self.log.emit(self.now, "RequestComplete", req.rid)
        traj = self.trajs[self.agent_traj[req.agent]]
        if req.round + 1 < len(traj.rounds):
            nxt, ctx = req.round + 1, req.cached + req.append + req.gen
            self._at(self.now, EventKind.Arrival,
                     lambda: self._arrive(req.agent, nxt, ctx))
        else:
            self.agent_done[req.agent] = self.now
        self._arm_tick()

    # ------------------------------------------------------------- bursts
    def _start_bursts(self) -> None:
        spec = self.p.bursts
        if spec is None:
            return
        for pool in (self.pes, self.des):
            for i, e in enumerate(pool):
                peer = pool[(i + 1) % len(pool)]
                self._at(spec.offset, EventKind.Monitor,
                         lambda e=e, peer=peer: self._burst(e, peer))

    def _burst(self, e: _Engine, peer: _Engine) -> None:
        if self._workload_done() or self.stopped:
            return
        spec = self.p.bursts
        nbytes = int(spec.duty_cycle * spec.period * self.cfg.cnic_bw)
        t0 = self.now

        def done(flow):
            self.bursts.append((e.name, t0, self.now))

        self.net.start(nbytes, (e.cnic_r, peer.cnic_w), Priority.HIGH, None, "burst", done)
        self._at(self.now + spec.period, EventKind.Monitor, lambda: self._burst(e, peer))

    # ------------------------------------------------------------- run loop
    def _workload_done(self) -> bool:
        return len(self.agent_done) == len(self.agent_traj) and \
            len(self.agent_traj) == len(self.arrivals)

    def stop(self, reason: str) -> None:
        self.stopped = True
        self.stop_reason = reason

    def _monitor_tick(self) -> None:
        if self.stopped or self._workload_done():
            return
        if self.monitor is not None:
            self.monitor(self)
        if not self.stopped:
            self._at(self.now + self.monitor_interval, EventKind.Monitor, self._monitor_tick)

    def run(self) -> "ClusterSim":
        for agent, t in enumerate(self.arrivals):
            self.agent_traj.append(agent % len(self.trajs))
            self._at(t, EventKind.Arrival, lambda a=agent: self._start_agent(a))
        self._start_bursts()
        if self.monitor is not None:
            self._at(self.monitor_interval, EventKind.Monitor, self._monitor_tick)
        net, q = self.net, self.q
        while not self.stopped:
            tf = net.next_completion()
            te = q.peek_time()
            t = min(tf, te)
            if math.isinf(t):
                break
            done = net.advance(t)
            self.now = t
            for f in sorted(done, key=lambda f: f.id):
                self.events += 1
                if f.on_done is not None:
                    f.on_done(f)
            while q.peek_time() <= t and not self.stopped:
                ev = q.pop()
                self.events += 1
                ev.action()
            if self.events > self.p.max_events:
                raise SimulationError(f"event budget exhausted at t={self.now:.6f}")
            if not done and te > t and tf == t:
                # Flow finishing below float resolution: force the closest one.
                f = min(net.flows.values(), key=lambda f: (f.remaining / f.rate, f.id))
                f.remaining = 0.0
        if not self.stopped and not self._workload_done():
            waiting = sum(1 for r in self.requests if r.completion is None)
            raise SimulationError(
                f"deadlock at t={self.now:.6f}: {waiting} unfinished requests, "
                f"pe_wait={len(self.pe_wait)} de_global={len(self.de_global)} "
                f"private={sum(len(v) for v in self.private.values())}")
        return self

    # ------------------------------------------------------------- results
    def request_states(self) -> List[RequestState]:
        out = []
        for r in self.requests:
            out.append(RequestState(
                self.trajs[self.agent_traj[r.agent]].id if r.agent < len(self.agent_traj) else "",
                r.round, r.cached, r.append, r.gen,
                assigned_pe=r.pe.id if r.pe else None, assigned_de=r.de.id if r.de else None,
                read_path=r.path, arrival=r.arrival, schedule=r.pe_assigned,
                first_token=r.first_token, second_token=r.second_token, completion=r.completion))
        return out

    def resource_ids(self, group: Optional[str] = None) -> List[str]:
        return [r.id for r in self.net.resources if group is None or r.group == group]

    def mean_rate(self, resource_id: str, t0: float, t1: float) -> float:
        """Average bytes/s over whole buckets covering [t0, t1)."""
        i = self.net.by_id[resource_id]
        b = self.net.bucket
        k0, k1 = int(round(t0 / b)), int(round(t1 / b))
        s = self.net.series[i]
        total = sum(s.get(k, 0.0) for k in range(k0, k1))
        return total / ((k1 - k0) * b)

    def utilization(self, resource_id: str, t0: float, t1: float) -> float:
        i = self.net.by_id[resource_id]
        return self.mean_rate(resource_id, t0, t1) / self.net.resources[i].capacity

    @property
    def makespan(self) -> float:
        return max((r.completion for r in self.requests if r.completion is not None), default=0.0)
