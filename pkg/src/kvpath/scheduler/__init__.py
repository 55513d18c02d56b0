from .inter import (
    DEAssignment,
    PEAssignment,
    PECategory,
    SchedulerParams,
    classify_pes,
    high_token_threshold,
    request_tokens,
    schedule_de_groups,
    schedule_de_round_robin,
    schedule_de_within_group,
    schedule_pe_fetch,
    schedule_pe_round_robin,
    select_read_path,
)
from .intra import (
    AttentionCostModel,
    ForwardBatch,
    QueueItem,
    QuotaInfeasible,
    build_forward_batch,
    estimate_attention_time,
    largest_fitting_chunk,
)

__all__ = [
    "AttentionCostModel", "DEAssignment", "ForwardBatch", "PEAssignment", "PECategory",
    "QueueItem", "QuotaInfeasible", "SchedulerParams", "build_forward_batch", "classify_pes",
    "estimate_attention_time", "high_token_threshold", "largest_fitting_chunk",
    "request_tokens", "schedule_de_groups", "schedule_de_round_robin",
    "schedule_de_within_group", "schedule_pe_fetch", "schedule_pe_round_robin",
    "select_read_path",
]
