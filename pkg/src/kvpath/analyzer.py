"""Closed-form link-load analysis for dual-path KV loading.

Per-pair traffic assumes every storage NIC is saturated and work is spread
evenly over all (PE, DE) engine pairs. Boundaries of the feasible P/D
interval are computed with :class:`fractions.Fraction` so that tightness at
the interval ends can be asserted exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Union

import yaml

from .model import ClusterConfig

Number = Union[int, float, Fraction]

MODEL_DIR = Path(__file__).parent / "data" / "models"

CONSTRAINTS = ("pe_cnic_read", "pe_cnic_write", "de_cnic_read", "de_cnic_write",
               "pe_dram", "de_dram")


def _q(x: Number) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


def pair_traffic(config: ClusterConfig, exact: bool = False):
    """Traffic per PE-DE engine pair for the PE read path and the DE read path."""
    B, s = _q(config.cnic_bw), _q(config.storage_ratio)
    P, D, g = config.prefill_nodes, config.decode_nodes, config.gpus_per_node
    t_p = B * s / (D * g * g)
    t_c = B * s / (P * g * g)
    if exact:
        return t_p, t_c
    return float(t_p), float(t_c)


@dataclass(frozen=True)
class LinkLoadReport:
    t_p: float
    t_c: float
    pe_cnic_read: float
    pe_cnic_write: float
    de_cnic_read: float
    de_cnic_write: float
    pe_dram: float
    de_dram: float
    slack: dict

    def utilization(self, cnic_bw: float, dram_bw: float) -> dict:
        caps = {k: (dram_bw if k.endswith("dram") else cnic_bw) for k in CONSTRAINTS}
        return {k: getattr(self, k) / caps[k] for k in CONSTRAINTS}

    @property
    def feasible(self) -> bool:
        return all(v >= 0 for v in self.slack.values())

    def to_dict(self) -> dict:
        return asdict(self)


def exact_link_loads(config: ClusterConfig) -> dict:
    """Per-engine CNIC and per-node DRAM loads as exact fractions."""
    B, s, M = _q(config.cnic_bw), _q(config.storage_ratio), _q(config.dram_bw)
    P, D, g = config.prefill_nodes, config.decode_nodes, config.gpus_per_node
    t_p, t_c = pair_traffic(config, exact=True)
    r = Fraction(P, D)
    base = B * s / g
    loads = {
        "pe_cnic_read": 2 * t_p * D * g,
        "pe_cnic_write": (t_p + t_c) * D * g,
        "de_cnic_read": (t_p + 2 * t_c) * P * g,
        "de_cnic_write": (2 * t_p + t_c) * P * g,
        "pe_dram": 2 * s * B,
        "de_dram": (3 + 2 * r) * B * s,
    }
    # Expanded forms; kept side by side with the pair sums above as a self-check.
    assert loads["pe_cnic_read"] == 2 * base
    assert loads["pe_cnic_write"] == base * (1 + Fraction(D, P))
    assert loads["de_cnic_read"] == base * (r + 2)
    assert loads["de_cnic_write"] == base * (2 * r + 1)
    caps = {k: (M if k.endswith("dram") else B) for k in loads}
    slack = {k: caps[k] - v for k, v in loads.items()}
    return {"t_p": t_p, "t_c": t_c, "loads": loads, "slack": slack, "caps": caps}


def link_loads(config: ClusterConfig) -> LinkLoadReport:
    ex = exact_link_loads(config)
    return LinkLoadReport(
        t_p=float(ex["t_p"]), t_c=float(ex["t_c"]),
        **{k: float(v) for k, v in ex["loads"].items()},
        slack={k: float(v) for k, v in ex["slack"].items()},
    )


def binding_constraint(config: ClusterConfig) -> str:
    """Constraint with the highest load-to-capacity ratio."""
    ex = exact_link_loads(config)
    return max(CONSTRAINTS, key=lambda k: ex["loads"][k] / ex["caps"][k])


@dataclass(frozen=True)
class PDRange:
    lo: Fraction
    hi: Fraction

    @property
    def empty(self) -> bool:
        return self.lo > self.hi or self.hi <= 0

    def contains(self, ratio: Number) -> bool:
        r = _q(ratio)
        return not self.empty and self.lo <= r <= self.hi

    def to_dict(self) -> dict:
        return {"lo": str(self.lo), "hi": str(self.hi), "lo_float": float(self.lo),
                "hi_float": float(self.hi), "empty": self.empty}


def feasible_pd_range(config: Optional[ClusterConfig] = None, *, g: Optional[int] = None,
                      s: Optional[Number] = None, m_over_bs: Optional[Number] = None) -> PDRange:
    """Bottleneck-free interval of P/D.

    Either pass a ``ClusterConfig`` or the three dimensionless inputs directly.
    An empty result is still returned as a ``PDRange`` whose ``empty`` is True.
    """
    if config is not None:
        g = config.gpus_per_node
        s = _q(config.storage_ratio)
        m_over_bs = _q(config.dram_bw) / (_q(config.cnic_bw) * s)
    if g is None or s is None or m_over_bs is None:
        raise TypeError("need a config or all of g, s, m_over_bs")
    s, mbs = _q(s), _q(m_over_bs)
    if s >= g:
        raise ValueError(f"storage ratio s={s} must be < g={g}")
    lo = s / (g - s)
    hi = min((g - 2 * s) / s, (g - s) / (2 * s), (mbs - 3) / 2)
    return PDRange(lo, hi)


@dataclass(frozen=True)
class ModelSpec:
    """FLOP and KV-size description used for the cache-compute ratio.

    ``attention_topk`` caps the number of key tokens each query attends to
    (sparse attention); ``indexer_flop_coeff`` is a dense per-pair cost paid
    over the full context by the top-k selector.
    """

    name: str
    n_layer: int
    kv_bytes_per_token_per_layer: float
    flops_per_token_dense: float
    attention_flop_coeff: float
    attention_topk: Optional[int] = None
    indexer_flop_coeff: float = 0.0

    def __post_init__(self):
        if min(self.n_layer, self.kv_bytes_per_token_per_layer,
               self.flops_per_token_dense, self.attention_flop_coeff) <= 0:
            raise ValueError(f"model spec {self.name}: all sizes must be positive")

    @classmethod
    def load(cls, name_or_path: Union[str, Path]) -> "ModelSpec":
        p = Path(name_or_path)
        if not p.exists():
            p = MODEL_DIR / f"{name_or_path}.yaml"
        with open(p) as f:
            d = yaml.safe_load(f)
        fields = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        # YAML 1.1 reads "74.0e9" (no exponent sign) as a string.
        for k in ("kv_bytes_per_token_per_layer", "flops_per_token_dense",
                  "attention_flop_coeff", "indexer_flop_coeff"):
            if k in fields:
                fields[k] = float(fields[k])
        for k in ("n_layer", "attention_topk"):
            if fields.get(k) is not None:
                fields[k] = int(fields[k])
        return cls(**fields)


def available_models() -> list[str]:
    return sorted(p.stem for p in MODEL_DIR.glob("*.yaml"))


def cache_compute_ratio(spec: ModelSpec, context_len: int, append_len: int) -> float:
    """KV bytes to load per unit of prefill compute, in GB per PFLOP."""
    if not context_len >= append_len >= 1:
        raise ValueError("need context_len >= append_len >= 1")
    kv_bytes = context_len * spec.n_layer * spec.kv_bytes_per_token_per_layer
    keys = context_len if spec.attention_topk is None else min(context_len, spec.attention_topk)
    flops = (append_len * spec.flops_per_token_dense
             + spec.attention_flop_coeff * append_len * keys
             + spec.indexer_flop_coeff * append_len * context_len)
    if flops <= 0:
        raise ZeroDivisionError("prefill compute is zero")
    return (kv_bytes / 1e9) / (flops / 1e15)


def analyze(config: ClusterConfig) -> dict:
    """Everything the ``analyze`` subcommand prints."""
    rep = link_loads(config)
    out = {"link_loads": rep.to_dict(),
           "utilization": rep.utilization(config.cnic_bw, config.dram_bw),
           "binding_constraint": binding_constraint(config),
           "pd_ratio": config.prefill_nodes / config.decode_nodes}
    if config.storage_ratio < config.gpus_per_node:
        rng = feasible_pd_range(config)
        out["feasible_range"] = rng.to_dict()
        out["feasible"] = rng.contains(Fraction(config.prefill_nodes, config.decode_nodes))
    else:
        out["feasible_range"] = None
        out["feasible"] = False
    return out
