"""Domain types shared across the package: cluster shape, trajectories,
requests, engine load reports and KV block layouts.

All values here are immutable. Bandwidths are bytes/s and token counts are
the universal load unit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple


class ValidationError(ValueError):
    """A domain value violates one of its invariants."""


class ReadPath(str, enum.Enum):
    PE = "PEPath"
    DE = "DEPath"


class EngineKind(str, enum.Enum):
    PE = "PE"
    DE = "DE"


class BlockKind(str, enum.Enum):
    LAYER = "LayerBlock"
    FULL = "FullBlock"


@dataclass(frozen=True)
class ClusterConfig:
    """Node counts and per-engine / per-node capacities.

    ``storage_ratio`` is the node storage bandwidth expressed as a multiple of
    the per-engine compute-NIC bandwidth, so one node reads from storage at
    ``storage_ratio * cnic_bw`` bytes/s.
    """

    prefill_nodes: int = 1
    decode_nodes: int = 1
    gpus_per_node: int = 8
    cnic_bw: float = 50e9
    storage_ratio: float = 1.0
    dram_bw: float = 500e9
    n_layer: int = 30
    kv_bytes_per_token_per_layer: int = 656
    block_size_tokens: int = 64
    hbm_capacity_tokens: int = 4_000_000
    pe_buffer_bytes: float = 80e9
    de_buffer_bytes: float = 80e9

    def __post_init__(self):
        checks = [
            (self.prefill_nodes >= 1, "prefill_nodes must be >= 1"),
            (self.decode_nodes >= 1, "decode_nodes must be >= 1"),
            (self.gpus_per_node >= 1, "gpus_per_node must be >= 1"),
            (self.cnic_bw > 0, "cnic_bw must be > 0"),
            (0 < self.storage_ratio <= self.gpus_per_node,
             "storage_ratio must satisfy 0 < s <= gpus_per_node"),
            (self.dram_bw > 0, "dram_bw must be > 0"),
            (self.n_layer >= 1, "n_layer must be >= 1"),
            (self.kv_bytes_per_token_per_layer >= 1, "kv_bytes_per_token_per_layer must be >= 1"),
            (self.block_size_tokens >= 1, "block_size_tokens must be >= 1"),
            (self.hbm_capacity_tokens >= 1, "hbm_capacity_tokens must be >= 1"),
            (self.pe_buffer_bytes > 0 and self.de_buffer_bytes > 0, "buffer sizes must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValidationError(msg)

    # Short aliases matching the usual notation of the bandwidth analysis.
    @property
    def P(self) -> int:
        return self.prefill_nodes

    @property
    def D(self) -> int:
        return self.decode_nodes

    @property
    def g(self) -> int:
        return self.gpus_per_node

    @property
    def B(self) -> float:
        return self.cnic_bw

    @property
    def s(self) -> float:
        return self.storage_ratio

    @property
    def M(self) -> float:
        return self.dram_bw

    @property
    def storage_bw(self) -> float:
        return self.storage_ratio * self.cnic_bw

    @property
    def kv_bytes_per_token(self) -> int:
        return self.n_layer * self.kv_bytes_per_token_per_layer

    @property
    def n_pe(self) -> int:
        return self.prefill_nodes * self.gpus_per_node

    @property
    def n_de(self) -> int:
        return self.decode_nodes * self.gpus_per_node


@dataclass(frozen=True)
class Round:
    append_tokens: int
    gen_tokens: int


@dataclass(frozen=True)
class Trajectory:
    id: str
    rounds: Tuple[Round, ...]

    def __post_init__(self):
        object.__setattr__(self, "rounds", tuple(self.rounds))
        if not self.id or any(c in self.id for c in "\t\n"):
            raise ValidationError(f"invalid trajectory id {self.id!r}")
        if not self.rounds:
            raise ValidationError(f"trajectory {self.id} has no rounds")
        for i, r in enumerate(self.rounds):
            if r.append_tokens < 0:
                raise ValidationError(f"trajectory {self.id} round {i}: append_tokens < 0")
            if r.gen_tokens < 1:
                raise ValidationError(f"trajectory {self.id} round {i}: gen_tokens < 1")

    @classmethod
    def from_pairs(cls, id: str, pairs: Sequence[Tuple[int, int]]) -> "Trajectory":
        return cls(id, tuple(Round(int(a), int(g)) for a, g in pairs))

    @property
    def total_tokens(self) -> int:
        return sum(r.append_tokens + r.gen_tokens for r in self.rounds)

    def pairs(self) -> list[Tuple[int, int]]:
        return [(r.append_tokens, r.gen_tokens) for r in self.rounds]


def context_before(trajectory: Trajectory, round_index: int) -> int:
    """Tokens accumulated before ``round_index`` (appended plus generated)."""
    if not 0 <= round_index < len(trajectory.rounds):
        raise IndexError(
            f"round_index {round_index} out of range for {len(trajectory.rounds)} rounds"
        )
    return sum(r.append_tokens + r.gen_tokens for r in trajectory.rounds[:round_index])


def blocks_for(token_count: int, config: ClusterConfig) -> int:
    if token_count < 0:
        raise ValueError("token_count must be >= 0")
    return math.ceil(token_count / config.block_size_tokens)


@dataclass(frozen=True)
class RequestState:
    """One turn of a trajectory, as reported once it has been simulated.

    Timestamps that were never reached are ``None``.
    """

    trajectory_id: str
    round_index: int
    cached_len: int
    append_len: int
    gen_target: int
    assigned_pe: Optional[int] = None
    assigned_de: Optional[int] = None
    read_path: Optional[ReadPath] = None
    arrival: Optional[float] = None
    schedule: Optional[float] = None
    first_token: Optional[float] = None
    second_token: Optional[float] = None
    completion: Optional[float] = None

    def __post_init__(self):
        if self.cached_len < 0 or self.append_len < 0 or self.gen_target < 1:
            raise ValidationError("invalid request token counts")
        stamps = [t for t in (self.arrival, self.schedule, self.first_token,
                              self.second_token, self.completion) if t is not None]
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise ValidationError(f"non-monotone timestamps for {self.request_id}")

    @property
    def request_id(self) -> str:
        return f"{self.trajectory_id}/{self.round_index}"

    @property
    def prompt_len(self) -> int:
        return self.cached_len + self.append_len

    @property
    def total_len(self) -> int:
        return self.cached_len + self.append_len + self.gen_target

    @classmethod
    def for_round(cls, trajectory: Trajectory, round_index: int, **kw) -> "RequestState":
        r = trajectory.rounds[round_index]
        return cls(trajectory.id, round_index, context_before(trajectory, round_index),
                   r.append_tokens, r.gen_tokens, **kw)


@dataclass(frozen=True)
class EngineSnapshot:
    engine_id: int
    node_id: int
    kind: EngineKind
    seq: int = 0
    tok: int = 0
    read_q: float = 0.0
    hbm_free_tokens: Optional[int] = None

    def __post_init__(self):
        if self.seq < 0 or self.tok < 0:
            raise ValidationError("seq and tok must be >= 0")
        if self.seq == 0 and self.tok != 0:
            raise ValidationError("tok must be 0 when seq is 0")


@dataclass(frozen=True)
class BlockRef:
    kind: BlockKind
    token_range: Tuple[int, int]
    bytes: int
    layer_index: Optional[int] = None

    @property
    def n_tokens(self) -> int:
        return self.token_range[1] - self.token_range[0]


def layer_block(config: ClusterConfig, layer_index: int, start: int) -> BlockRef:
    if not 0 <= layer_index < config.n_layer:
        raise IndexError(f"layer {layer_index} out of range")
    end = start + config.block_size_tokens
    return BlockRef(BlockKind.LAYER, (start, end),
                    config.block_size_tokens * config.kv_bytes_per_token_per_layer, layer_index)


def full_block(config: ClusterConfig, start: int) -> BlockRef:
    end = start + config.block_size_tokens
    return BlockRef(BlockKind.FULL, (start, end),
                    config.n_layer * config.block_size_tokens * config.kv_bytes_per_token_per_layer)


def concat_layer_blocks(blocks: Sequence[BlockRef], config: ClusterConfig) -> BlockRef:
    """Stack one LayerBlock per layer over a common token range into a FullBlock."""
    if len(blocks) != config.n_layer:
        raise ValueError(f"need {config.n_layer} layer blocks, got {len(blocks)}")
    ranges = {b.token_range for b in blocks}
    if len(ranges) != 1 or any(b.kind is not BlockKind.LAYER for b in blocks):
        raise ValueError("layer blocks must share one token range")
    if sorted(b.layer_index for b in blocks) != list(range(config.n_layer)):
        raise ValueError("layer blocks must cover every layer exactly once")
    return BlockRef(BlockKind.FULL, blocks[0].token_range, sum(b.bytes for b in blocks))
