"""Inter-engine scheduling: which PE and DE serve a request, and which side
reads its KV-Cache from storage.

Everything here is a pure function of its inputs. Ties are broken by the
lowest engine (or group) id.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Callable, Dict, Hashable, List, Optional, Sequence, Tuple

from ..model import EngineKind, EngineSnapshot, ReadPath


@dataclass(frozen=True)
class SchedulerParams:
    # Token thresholds; None means "derive from the cluster" in the simulator
    # and "no limit" in the pure functions below.
    alpha: Optional[float] = None
    beta: Optional[float] = None
    z_factor: float = 1.05
    compute_quota: float = 0.3
    # "forward": quota bounds the whole-forward attention time; "layer": one layer.
    quota_scope: str = "forward"
    # Whether a request's length in the DE threshold includes its generation.
    len_includes_gen: bool = True

    def __post_init__(self):
        if (self.alpha is not None and self.alpha <= 0) or (self.beta is not None and self.beta <= 0):
            raise ValueError("alpha and beta must be > 0")
        if self.z_factor < 1:
            raise ValueError("z_factor must be >= 1")
        if self.compute_quota <= 0:
            raise ValueError("compute_quota must be > 0")
        if self.quota_scope not in ("forward", "layer"):
            raise ValueError("quota_scope must be 'forward' or 'layer'")


class PECategory(enum.IntEnum):
    OVERLOADED = 1
    SHORT_QUEUE = 2
    LONG_QUEUE = 3


def request_tokens(r: Any) -> int:
    """Load of a request in tokens: cached + append + generation target."""
    if isinstance(r, (int, float)):
        return int(r)
    if hasattr(r, "total_len"):
        return int(r.total_len)
    return int(r.tokens)


def categorize(snap: EngineSnapshot, tok: float, params: SchedulerParams) -> PECategory:
    if params.beta is not None and tok > params.beta:
        return PECategory.OVERLOADED
    if params.alpha is None or snap.read_q <= params.alpha:
        return PECategory.SHORT_QUEUE
    return PECategory.LONG_QUEUE


def classify_pes(snapshots: Sequence[EngineSnapshot], params: SchedulerParams):
    """Split PEs into (overloaded, short-queue, long-queue) lists."""
    c1, c2, c3 = [], [], []
    for s in sorted(snapshots, key=lambda s: s.engine_id):
        if s.kind is not EngineKind.PE:
            raise ValueError(f"engine {s.engine_id} is not a PE")
        {PECategory.OVERLOADED: c1, PECategory.SHORT_QUEUE: c2,
         PECategory.LONG_QUEUE: c3}[categorize(s, s.tok, params)].append(s)
    return c1, c2, c3


@dataclass(frozen=True)
class PEAssignment:
    request: Any
    pe_id: int
    category: PECategory


def schedule_pe_fetch(waiting_queue: Sequence[Any], pe_snapshots: Sequence[EngineSnapshot],
                      params: SchedulerParams,
                      tokens_of: Callable[[Any], int] = request_tokens) -> List[PEAssignment]:
    """Assign the FIFO head of the waiting queue to PEs one request at a time.

    The chosen PE is the least-loaded one among short-queue PEs, falling back
    to long-queue PEs. Overloaded PEs never receive work; the fetch stops as
    soon as no PE is eligible.
    """
    snaps = {s.engine_id: s for s in pe_snapshots}
    tok = {e: s.tok for e, s in snaps.items()}
    cat = {e: categorize(s, s.tok, params) for e, s in snaps.items()}
    out: List[PEAssignment] = []
    for r in waiting_queue:
        pick = None
        for want in (PECategory.SHORT_QUEUE, PECategory.LONG_QUEUE):
            cands = [e for e in snaps if cat[e] is want]
            if cands:
                pick = min(cands, key=lambda e: (tok[e], e))
                break
        if pick is None:
            break
        out.append(PEAssignment(r, pick, cat[pick]))
        tok[pick] += tokens_of(r)
        cat[pick] = categorize(snaps[pick], tok[pick], params)
    return out


def schedule_pe_round_robin(waiting_queue: Sequence[Any], pe_snapshots: Sequence[EngineSnapshot],
                            params: SchedulerParams, start: int = 0,
                            tokens_of: Callable[[Any], int] = request_tokens):
    """Baseline: cycle through PEs in id order, skipping overloaded ones.

    Returns the assignments and the cursor to resume from on the next fetch.
    """
    order = sorted(s.engine_id for s in pe_snapshots)
    tok = {s.engine_id: s.tok for s in pe_snapshots}
    out: List[PEAssignment] = []
    cursor = start
    for r in waiting_queue:
        pick = None
        for k in range(len(order)):
            e = order[(cursor + k) % len(order)]
            if params.beta is None or tok[e] <= params.beta:
                pick, cursor = e, (cursor + k + 1) % len(order)
                break
        if pick is None:
            break
        out.append(PEAssignment(r, pick, PECategory.SHORT_QUEUE))
        tok[pick] += tokens_of(r)
    return out, cursor


def schedule_de_groups(global_queue: Sequence[Any], group_sums: Dict[Hashable, float],
                       tokens_of: Callable[[Any], int] = request_tokens):
    """Drain the global DE queue into per-group private queues.

    Each request goes to the group with the smallest total token count at
    that moment (lowest group id on ties). Returns ``(appends, new_sums)``.
    """
    sums = dict(group_sums)
    appends: Dict[Hashable, List[Any]] = {g: [] for g in sums}
    if not sums:
        return appends, sums
    for r in global_queue:
        g = min(sums, key=lambda k: (sums[k], k))
        appends[g].append(r)
        sums[g] += tokens_of(r)
    return appends, sums


@dataclass(frozen=True)
class DEAssignment:
    request: Any
    de_id: int
    # "balanced" when the DE stays under the high-token threshold, else "high".
    category: str


def high_token_threshold(private_queue: Sequence[Any], de_snapshots: Sequence[EngineSnapshot],
                         params: SchedulerParams,
                         len_of: Callable[[Any], int] = request_tokens) -> Tuple[float, int]:
    """Returns (Z, |R|) where R is the FIFO prefix fitting the group's free HBM."""
    free = sum(s.hbm_free_tokens or 0 for s in de_snapshots)
    used, n = 0, 0
    for r in private_queue:
        ln = len_of(r)
        if used + ln > free:
            break
        used += ln
        n += 1
    z = params.z_factor * (used + sum(s.tok for s in de_snapshots)) / len(de_snapshots)
    return z, n


def schedule_de_within_group(private_queue: Sequence[Any], de_snapshots: Sequence[EngineSnapshot],
                             params: SchedulerParams,
                             len_of: Callable[[Any], int] = request_tokens) -> List[DEAssignment]:
    """Pop requests from the head of a group's private queue onto its DEs."""
    if not de_snapshots:
        return []
    z, _ = high_token_threshold(private_queue, de_snapshots, params, len_of)
    tok = {s.engine_id: s.tok for s in de_snapshots}
    seq = {s.engine_id: s.seq for s in de_snapshots}
    free = {s.engine_id: s.hbm_free_tokens or 0 for s in de_snapshots}
    out: List[DEAssignment] = []
    for r in private_queue:
        ln = len_of(r)
        fits = [e for e in sorted(free) if free[e] >= ln]
        if not fits:
            break
        low = [e for e in fits if tok[e] + ln <= z]
        if low:
            pick, category = min(low, key=lambda e: (seq[e], e)), "balanced"
        else:
            pick, category = min(fits, key=lambda e: (tok[e], e)), "high"
        out.append(DEAssignment(r, pick, category))
        tok[pick] += ln
        seq[pick] += 1
        free[pick] -= ln
    return out


def schedule_de_round_robin(private_queue: Sequence[Any], de_snapshots: Sequence[EngineSnapshot],
                            start: int = 0, len_of: Callable[[Any], int] = request_tokens):
    order = sorted(s.engine_id for s in de_snapshots)
    free = {s.engine_id: s.hbm_free_tokens or 0 for s in de_snapshots}
    out: List[DEAssignment] = []
    cursor = start
    for r in private_queue:
        ln = len_of(r)
        pick = None
        for k in range(len(order)):
            e = order[(cursor + k) % len(order)]
            if free[e] >= ln:
                pick, cursor = e, (cursor + k + 1) % len(order)
                break
        if pick is None:
            break
        out.append(DEAssignment(r, pick, "round_robin"))
        free[pick] -= ln
    return out, cursor


def select_read_path(pe_node_read_q: float, de_node_read_q: float) -> ReadPath:
    """Read on the side whose node has the shorter storage queue (PE on ties)."""
    return ReadPath.PE if pe_node_read_q <= de_node_read_q else ReadPath.DE
