from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from ..scheduler import AttentionCostModel

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


class Policy(str, enum.Enum):
    DUAL_PATH = "dual_path"
    PE_ONLY = "pe_only"
    ORACLE = "oracle"


@dataclass(frozen=True)
class Calibration:
    """Timing model of the GPUs and transfer submission costs."""

    attention: AttentionCostModel = field(default_factory=AttentionCostModel)
    # Decode steps reuse the prefill model unless a separate one is given.
    decode_attention: Optional[AttentionCostModel] = None
    ffn_per_token: float = 0.0
    ffn_layer_constant: float = 0.0
    decode_step_overhead: float = 0.0
    submission_overhead: float = 1e-6
    doorbell_batch: int = 16

    def __post_init__(self):
        if min(self.ffn_per_token, self.ffn_layer_constant, self.decode_step_overhead,
               self.submission_overhead) < 0:
            raise ValueError("calibration times must be >= 0")
        if self.doorbell_batch < 1:
            raise ValueError("doorbell_batch must be >= 1")

    @property
    def decode_model(self) -> AttentionCostModel:
        return self.decode_attention or self.attention

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        d = dict(d)
        att = AttentionCostModel(**d.pop("attention", {}))
        dec = d.pop("decode_attention", None)
        return cls(attention=att, decode_attention=AttentionCostModel(**dec) if dec else None,
                   **{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @classmethod
    def load(cls, path=None) -> "Calibration":
        path = path or DATA_DIR / "synthetic_calibration.yaml"
        with open(path) as f:
            return cls.from_dict(yaml.safe_load(f) or {})


@dataclass(frozen=True)
class BurstSpec:
    """Periodic high-priority collective traffic on every compute NIC."""

    period: float = 1e-3
    duty_cycle: float = 0.2
    offset: float = 0.0

    def __post_init__(self):
        if self.period <= 0 or not 0 < self.duty_cycle <= 1:
            raise ValueError("burst period must be > 0 and duty_cycle in (0, 1]")


@dataclass(frozen=True)
class SimParams:
    policy: Policy = Policy.DUAL_PATH
    # Ablation toggles; None defers to the policy.
    layerwise: bool = True
    dual_path: Optional[bool] = None
    scheduler: str = "adaptive"  # or "round_robin"
    fetch_interval: float = 0.01
    # None puts every PE node into one group.
    pe_nodes_per_group: Optional[int] = None
    de_nodes_per_group: int = 1
    read_concurrency: int = 8
    bucket: float = 0.1
    record_events: bool = False
    bursts: Optional[BurstSpec] = None
    wrr_high_weight: float = 99.0
    wrr_low_weight: float = 1.0
    max_events: int = 50_000_000
    alpha_seconds: float = 3.0
    beta_seconds: float = 5.0

    def __post_init__(self):
        if self.scheduler not in ("adaptive", "round_robin"):
            raise ValueError("scheduler must be 'adaptive' or 'round_robin'")
        if self.fetch_interval <= 0 or self.bucket <= 0:
            raise ValueError("fetch_interval and bucket must be > 0")
        if self.read_concurrency < 1 or self.de_nodes_per_group < 1:
            raise ValueError("read_concurrency and de_nodes_per_group must be >= 1")
        if self.pe_nodes_per_group is not None and self.pe_nodes_per_group < 1:
            raise ValueError("pe_nodes_per_group must be >= 1")

    @property
    def uses_dual_path(self) -> bool:
        if self.dual_path is not None:
            return self.dual_path
        return self.policy is not Policy.PE_ONLY

    @property
    def oracle(self) -> bool:
        return self.policy is Policy.ORACLE
