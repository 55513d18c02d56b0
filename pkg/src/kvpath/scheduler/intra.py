"""Intra-engine scheduling: packing a PE's FIFO queue into forward batches
bounded by an attention-time budget (the compute quota)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, List, Optional, Sequence, Tuple

from .inter import SchedulerParams


class QuotaInfeasible(RuntimeError):
    """Even a single token of the queue head exceeds the compute quota."""


@dataclass(frozen=True)
class AttentionCostModel:
    """Per-layer attention time as a function of (cached, bsz) pairs.

    time = constant + sum(bilinear * bsz * cached + quadratic * bsz**2 + linear * bsz)
    """

    coeff_bilinear: float = 0.0
    coeff_quadratic: float = 0.0
    coeff_linear: float = 0.0
    constant: float = 0.0

    def __post_init__(self):
        if min(self.coeff_bilinear, self.coeff_quadratic, self.coeff_linear, self.constant) < 0:
            raise ValueError("cost coefficients must be >= 0")

    def pair_time(self, cached: float, bsz: float) -> float:
        return bsz * (self.coeff_bilinear * cached + self.coeff_quadratic * bsz + self.coeff_linear)


def estimate_attention_time(pairs: Iterable[Tuple[float, float]], cost_model: AttentionCostModel,
                            n_layer: Optional[int] = None) -> float:
    """Per-layer attention time of a batch; whole-forward time when ``n_layer`` is given."""
    t = cost_model.constant
    for cached, bsz in pairs:
        if cached < 0 or bsz < 0:
            raise ValueError("cached and bsz must be >= 0")
        t += cost_model.pair_time(cached, bsz)
    return t if n_layer is None else n_layer * t


@dataclass(frozen=True)
class QueueItem:
    key: Any
    cached: int
    bsz: int


@dataclass
class ForwardBatch:
    entries: List[QueueItem] = field(default_factory=list)
    # Key of the request split by this batch (its remainder stays queued).
    chunked: Optional[Any] = None
    # Key of a queued request that did not fit at all.
    deferred: Optional[Any] = None
    estimate: float = 0.0

    @property
    def tokens(self) -> int:
        return sum(e.bsz for e in self.entries)


def largest_fitting_chunk(base: float, cached: int, bsz: int, budget: float,
                          cost_model: AttentionCostModel, scale: float = 1.0) -> int:
    """Largest b in [0, bsz) with ``scale * (base + pair_time(cached, b)) <= budget``.

    ``base`` is the per-layer estimate of the batch built so far.
    """
    lo, hi = 0, bsz - 1
    if scale * base > budget:
        return 0
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if scale * (base + cost_model.pair_time(cached, mid)) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return lo


def build_forward_batch(fifo_queue: Sequence[QueueItem], params: SchedulerParams,
                        cost_model: AttentionCostModel, n_layer: int = 1,
                        max_tokens: Optional[int] = None) -> ForwardBatch:
    """FIFO-pack queued requests under the compute quota, chunking the first
    request that overflows.

    ``max_tokens`` optionally bounds the sum of cached + bsz over the batch
    (HBM residency); it is never applied to the first entry so the queue
    head always makes progress.
    """
    scale = n_layer if params.quota_scope == "forward" else 1
    quota = params.compute_quota
    batch = ForwardBatch(estimate=scale * cost_model.constant)
    base = cost_model.constant
    resident = 0
    for item in fifo_queue:
        if item.bsz <= 0:
            # Nothing to compute, but the request still rides the forward.
            batch.entries.append(item)
            continue
        t = base + cost_model.pair_time(item.cached, item.bsz)
        fits_hbm = max_tokens is None or not batch.entries or \
            resident + item.cached + item.bsz <= max_tokens
        if scale * t <= quota and fits_hbm:
            batch.entries.append(item)
            base, resident = t, resident + item.cached + item.bsz
            continue
        limit = item.bsz
        if max_tokens is not None and batch.entries:
            limit = min(limit, max(0, max_tokens - resident - item.cached) + 1)
        b = largest_fitting_chunk(base, item.cached, limit, quota, cost_model, scale) if limit > 0 else 0
        if b > 0:
            batch.entries.append(QueueItem(item.key, item.cached, b))
            batch.chunked = item.key
            base += cost_model.pair_time(item.cached, b)
        elif not batch.entries:
            raise QuotaInfeasible(
                f"request {item.key!r} (cached={item.cached}) cannot fit one token in "
                f"quota {quota}s")
        else:
            batch.deferred = item.key
        break
    batch.estimate = scale * base
    return batch
