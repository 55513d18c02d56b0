"""Fluid-flow network model.

Flows are greedy byte transfers over an ordered set of resources. Rates are
max-min fair (progressive filling) and are recomputed only when the set of
active flows changes. Two traffic classes exist; on resources arbitrated by
two-class weighted round-robin the high class may take at most its weighted
share while any low-class flow is present, so low-class traffic never
starves. Every other resource splits capacity evenly per flow regardless
of class; capacity one class leaves unused goes to the other.
"""

from __future__ import annotations

import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple


class ResourceKind(str, enum.Enum):
    SNIC = "SNIC"
    CNIC = "CNIC"
    DRAM = "DRAM"
    STORAGE = "STORAGE"
    GPU_COMPUTE = "GPU_COMPUTE"


class Priority(enum.IntEnum):
    HIGH = 0
    LOW = 1


@dataclass(frozen=True)
class FairShare:
    pass


@dataclass(frozen=True)
class TwoClassWRR:
    high_weight: float = 99.0
    low_weight: float = 1.0

    def __post_init__(self):
        if self.high_weight <= 0 or self.low_weight <= 0:
            raise ValueError("WRR weights must be > 0")

    @property
    def high_fraction(self) -> float:
        return self.high_weight / (self.high_weight + self.low_weight)

    @property
    def low_fraction(self) -> float:
        return self.low_weight / (self.high_weight + self.low_weight)


@dataclass
class Resource:
    id: str
    kind: ResourceKind
    capacity: float
    arbitration: object = field(default_factory=FairShare)
    # Resource class used for reporting, e.g. "pe_cnic_read".
    group: str = ""
    index: int = -1

    def __post_init__(self):
        if not self.capacity > 0 or math.isinf(self.capacity):
            raise ValueError(f"resource {self.id}: capacity must be finite and > 0")


@dataclass
class Flow:
    id: int
    bytes_total: int
    path: Tuple[int, ...]
    priority: Priority = Priority.LOW
    request_id: Optional[str] = None
    stage_label: str = ""
    on_done: Optional[Callable[["Flow"], None]] = None
    started: float = 0.0
    remaining: float = 0.0
    rate: float = 0.0
    finished: Optional[float] = None

    @property
    def bytes_done(self) -> float:
        return self.bytes_total - self.remaining


@dataclass(frozen=True)
class FlowAllocation:
    flow_id: int
    rate: float


def _fill(groups: Sequence[Tuple[Tuple[int, ...], int]], caps: Dict[int, float]) -> List[float]:
    """Progressive filling over flow groups sharing identical paths.

    ``groups`` holds (path, number_of_flows); returns the per-flow rate of
    each group. Resources are visited in bottleneck order, ties broken by
    resource index.
    """
    rate = [0.0] * len(groups)
    users: Dict[int, int] = defaultdict(int)
    members: Dict[int, List[int]] = defaultdict(list)
    for gi, (path, n) in enumerate(groups):
        for r in path:
            users[r] += n
            members[r].append(gi)
    remaining = {r: max(caps[r], 0.0) for r in users}
    frozen = [False] * len(groups)
    left = len(groups)
    while left:
        best, best_share = -1, math.inf
        for r, u in users.items():
            if u > 0:
                share = remaining[r] / u
                if share < best_share or (share == best_share and r < best):
                    best, best_share = r, share
        if best < 0:
            break
        for gi in members[best]:
            if frozen[gi]:
                continue
            frozen[gi] = True
            left -= 1
            rate[gi] = best_share
            path, n = groups[gi]
            for r in path:
                remaining[r] = max(remaining[r] - best_share * n, 0.0)
                users[r] -= n
    return rate


def arbitrate(resource: Resource, flows: Sequence[Flow],
              demands: Optional[Dict[int, float]] = None) -> List[FlowAllocation]:
    """Split one resource's capacity among flows crossing it.

    ``demands`` (bytes/s per flow id) caps what each flow can use; flows
    without a demand are greedy. Within a class the split is max-min fair.
    """
    demands = demands or {}
    cap = resource.capacity

    def waterfill(members: List[Flow], budget: float) -> Dict[int, float]:
        out: Dict[int, float] = {}
        pending = sorted(members, key=lambda f: (demands.get(f.id, math.inf), f.id))
        while pending:
            share = budget / len(pending)
            f = pending[0]
            d = demands.get(f.id, math.inf)
            if d <= share:
                out[f.id] = d
                budget -= d
                pending.pop(0)
            else:
                for g in pending:
                    out[g.id] = share
                break
        return out

    high = [f for f in flows if f.priority is Priority.HIGH]
    low = [f for f in flows if f.priority is Priority.LOW]
    arb = resource.arbitration
    if isinstance(arb, TwoClassWRR) and high:
        high_cap = arb.high_fraction * cap if low else cap
        got_high = waterfill(high, high_cap)
        got_low = waterfill(low, cap - sum(got_high.values())) if low else {}
        got = {**got_high, **got_low}
    else:
        got = waterfill(list(flows), cap)
    return [FlowAllocation(f.id, got[f.id]) for f in flows]


class FluidNetwork:
    """Active flows, their rates, and per-resource byte accounting."""

    def __init__(self, bucket: float = 0.1):
        if bucket <= 0:
            raise ValueError("bucket must be > 0")
        self.resources: List[Resource] = []
        self.by_id: Dict[str, int] = {}
        self.flows: Dict[int, Flow] = {}
        self.now = 0.0
        self.bucket = bucket
        self.dirty = False
        self._next_id = 0
        self.res_rate: List[float] = []
        self.res_bytes: List[float] = []
        self.series: List[Dict[int, float]] = []

    def add_resource(self, res: Resource) -> int:
        if res.id in self.by_id:
            raise ValueError(f"duplicate resource {res.id}")
        res.index = len(self.resources)
        self.resources.append(res)
        self.by_id[res.id] = res.index
        self.res_rate.append(0.0)
        self.res_bytes.append(0.0)
        self.series.append(defaultdict(float))
        return res.index

    def start(self, bytes_total: int, path: Sequence[int], priority: Priority = Priority.LOW,
              request_id: Optional[str] = None, stage_label: str = "",
              on_done: Optional[Callable[[Flow], None]] = None) -> Flow:
        if bytes_total <= 0:
            raise ValueError("flows must carry > 0 bytes")
        if not path:
            raise ValueError("flow path must contain at least one resource")
        f = Flow(self._next_id, int(bytes_total), tuple(path), priority, request_id,
                 stage_label, on_done, started=self.now, remaining=float(bytes_total))
        self._next_id += 1
        self.flows[f.id] = f
        self.dirty = True
        return f

    def allocate(self) -> None:
        groups: Dict[Tuple[int, Tuple[int, ...]], List[Flow]] = {}
        for f in self.flows.values():
            groups.setdefault((f.priority, f.path), []).append(f)
        n_high: Dict[int, int] = defaultdict(int)
        n_low: Dict[int, int] = defaultdict(int)
        for (prio, path), fl in groups.items():
            for r in path:
                (n_high if prio is Priority.HIGH else n_low)[r] += len(fl)
        # High pass: WRR links cap the high class at its weight while low
        # traffic is present; fair-share links offer their per-flow share.
        caps = {}
        for r in self.resources:
            i, nl = r.index, n_low.get(r.index, 0)
            if not nl:
                caps[i] = r.capacity
            elif isinstance(r.arbitration, TwoClassWRR):
                caps[i] = r.capacity * r.arbitration.high_fraction
            else:
                caps[i] = r.capacity * n_high.get(i, 0) / (n_high.get(i, 0) + nl)
        high_keys = [k for k in groups if k[0] is Priority.HIGH]
        low_keys = [k for k in groups if k[0] is Priority.LOW]
        used = defaultdict(float)

        def fill(keys, cls_caps, add=False):
            rates = _fill([(k[1], len(groups[k])) for k in keys], cls_caps)
            for k, rt in zip(keys, rates):
                for f in groups[k]:
                    f.rate = f.rate + rt if add else rt
                for r in k[1]:
                    used[r] += rt * len(groups[k])

        def left():
            return {r.index: max(r.capacity - used[r.index], 0.0) for r in self.resources}

        if high_keys:
            fill(high_keys, caps)
        if low_keys:
            fill(low_keys, left())
            if high_keys:
                # Whatever low flows could not use (bottlenecked elsewhere)
                # goes back to the high class.
                fill(high_keys, left(), add=True)
        self.res_rate = [used[i] for i in range(len(self.resources))]
        self.dirty = False

    def next_completion(self) -> float:
        if self.dirty:
            self.allocate()
        best = math.inf
        for f in self.flows.values():
            if f.rate > 0:
                t = f.remaining / f.rate
                if t < best:
                    best = t
        return self.now + best

    def _account(self, t0: float, t1: float) -> None:
        dt = t1 - t0
        if dt <= 0:
            return
        b = self.bucket
        k0, k1 = int(t0 // b), int(t1 // b)
        for i, rate in enumerate(self.res_rate):
            if rate <= 0:
                continue
            self.res_bytes[i] += rate * dt
            s = self.series[i]
            if k0 == k1:
                s[k0] += rate * dt
            else:
                s[k0] += rate * ((k0 + 1) * b - t0)
                for k in range(k0 + 1, k1):
                    s[k] += rate * b
                s[k1] += rate * (t1 - k1 * b)

    def advance(self, t: float) -> List[Flow]:
        """Move the clock to ``t`` and return flows that finished, by id."""
        if t < self.now:
            raise ValueError(f"time went backwards: {t} < {self.now}")
        if self.dirty:
            self.allocate()
        dt = t - self.now
        self._account(self.now, t)
        done = []
        for f in self.flows.values():
            if f.rate > 0:
                f.remaining -= f.rate * dt
            if f.remaining <= 1e-9 * f.bytes_total + 1e-6:
                done.append(f)
        self.now = t
        for f in done:
            f.remaining = 0.0
            f.finished = t
            del self.flows[f.id]
        if done:
            self.dirty = True
        return done

    def capacity_violations(self, rel_tol: float = 1e-9) -> List[str]:
        if self.dirty:
            self.allocate()
        return [r.id for r in self.resources
                if self.res_rate[r.index] > r.capacity * (1 + rel_tol)]

    def rates_by_class(self, resource_index: int) -> Dict[Priority, float]:
        out = {Priority.HIGH: 0.0, Priority.LOW: 0.0}
        for f in self.flows.values():
            if resource_index in f.path:
                out[f.priority] += f.rate
        return out

    def bucket_series(self, resource_index: int, n_buckets: Optional[int] = None) -> List[float]:
        s = self.series[resource_index]
        n = n_buckets if n_buckets is not None else (max(s) + 1 if s else 0)
        return [s.get(k, 0.0) for k in range(n)]
