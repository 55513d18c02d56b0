"""Latency metrics, balance ratios, SLO and steady-state checks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class LatencyRecord:
    request_id: str
    ttft: float
    ttst: Optional[float] = None
    tpot: Optional[float] = None
    # Per trajectory: last completion minus first arrival; set on its last round.
    jct: Optional[float] = None

    def __post_init__(self):
        if self.ttft < 0:
            raise ValueError("ttft must be >= 0")
        if self.ttst is not None and self.ttst < self.ttft:
            raise ValueError("ttst must be >= ttft")


def latency_record(request_id: str, arrival: float, first_token: float,
                   second_token: Optional[float], completion: float, gen_len: int,
                   jct: Optional[float] = None) -> LatencyRecord:
    ttst = None if second_token is None else second_token - arrival
    tpot = (completion - first_token) / (gen_len - 1) if gen_len >= 2 else None
    return LatencyRecord(request_id, first_token - arrival, ttst, tpot, jct)


@dataclass(frozen=True)
class TTFTBreakdown:
    sch: float
    alloc: float
    read: float
    prefill: float

    @property
    def total(self) -> float:
        return self.sch + self.alloc + self.read + self.prefill


def ttft_breakdown(arrival: float, pe_assigned: float, de_assigned: float, read_done: float,
                   first_token: float) -> TTFTBreakdown:
    """Split TTFT at the PE assignment, DE assignment and end of storage read."""
    marks = [arrival, pe_assigned, de_assigned, read_done, first_token]
    if any(b < a for a, b in zip(marks, marks[1:])):
        raise ValueError("breakdown timestamps must be non-decreasing")
    return TTFTBreakdown(pe_assigned - arrival, de_assigned - pe_assigned,
                         read_done - de_assigned, first_token - read_done)


def summarize(values: Iterable[float]) -> Dict[str, Optional[float]]:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return {"mean": None, "p50": None, "p99": None}
    return {"mean": float(v.mean()), "p50": float(np.percentile(v, 50)),
            "p99": float(np.percentile(v, 99))}


def max_avg(values: Sequence[float]) -> Optional[float]:
    """max/mean of one sample; None when everything is zero."""
    if not values:
        return None
    mean = sum(values) / len(values)
    if mean <= 0:
        return None
    return max(values) / mean


def load_balance_ratio(samples: Mapping[str, Sequence[Tuple[float, float]]], window: float,
                       t0: float = 0.0, t1: Optional[float] = None
                       ) -> List[Tuple[float, Optional[float]]]:
    """Windowed max/avg traffic across resources.

    ``samples`` maps a resource id to (time, bytes) points. Returns one
    (window_start, ratio) per window in [t0, t1); ratio is None for windows
    in which no resource carried traffic.
    """
    if window <= 0:
        raise ValueError("window must be > 0")
    if len(samples) < 2:
        raise ValueError("at least two resources are needed")
    if t1 is None:
        t1 = max((t for pts in samples.values() for t, _ in pts), default=t0) + window * 1e-9
    n = max(1, math.ceil((t1 - t0) / window - 1e-12))
    sums = np.zeros((len(samples), n))
    for i, key in enumerate(sorted(samples)):
        for t, b in samples[key]:
            k = int((t - t0) // window)
            if 0 <= k < n:
                sums[i, k] += b
    return [(t0 + k * window, max_avg(sums[:, k].tolist())) for k in range(n)]


def defined(ratios: Iterable[Tuple[float, Optional[float]]]) -> List[float]:
    return [r for _, r in ratios if r is not None]


def window_mean(series: Sequence[Tuple[float, float]], lo: float, hi: float) -> Optional[float]:
    vals = [v for t, v in series if lo < t <= hi]
    return sum(vals) / len(vals) if vals else None


def detect_steady_state(ttft_series: Sequence[Tuple[float, float]], window: float = 15.0,
                        lookback: float = 180.0, threshold: float = 0.05,
                        now: Optional[float] = None) -> bool:
    """True when the windowed mean TTFT moved less than ``threshold`` relative
    to the same window ``lookback`` seconds earlier.

    ``ttft_series`` holds (time, ttft) points in time order.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    if not ttft_series:
        return False
    if now is None:
        now = ttft_series[-1][0]
    if now - lookback - window < ttft_series[0][0]:
        return False
    cur = window_mean(ttft_series, now - window, now)
    past = window_mean(ttft_series, now - lookback - window, now - lookback)
    if cur is None or past is None or past <= 0:
        return False
    return abs(cur - past) / past < threshold


def working_set(rate: float, mean_jct: float, mean_total_len: float,
                kv_bytes_per_token: float) -> float:
    """Live KV footprint (bytes) of agents in flight, each half-way through on average."""
    if min(rate, mean_jct, mean_total_len, kv_bytes_per_token) <= 0:
        raise ValueError("all inputs must be > 0")
    return rate * mean_jct * mean_total_len / 2 * kv_bytes_per_token


@dataclass(frozen=True)
class SLOResult:
    passed: bool
    violators: Tuple[str, ...]


def slo_check(records: Iterable[LatencyRecord], ttft_limit: float = 4.0,
              tpot_limit: float = 0.05) -> SLOResult:
    if ttft_limit <= 0 or tpot_limit <= 0:
        raise ValueError("limits must be > 0")
    bad = sorted(r.request_id for r in records
                 if r.ttft > ttft_limit or (r.tpot is not None and r.tpot > tpot_limit))
    return SLOResult(not bad, tuple(bad))
