from .cluster import ClusterSim, ConfigurationError, SimulationError
from .network import (
    FairShare,
    Flow,
    FlowAllocation,
    FluidNetwork,
    Priority,
    Resource,
    ResourceKind,
    TwoClassWRR,
    arbitrate,
)
from .params import BurstSpec, Calibration, Policy, SimParams
from .runner import (
    OfflineReport,
    OnlineLimits,
    OnlineReport,
    execute_decode,
    execute_prefill_de_path,
    execute_prefill_pe_path,
    resolve_scheduler,
    run_offline,
    run_online,
)

__all__ = [
    "BurstSpec", "Calibration", "ClusterSim", "ConfigurationError", "FairShare", "Flow",
    "FlowAllocation", "FluidNetwork", "OfflineReport", "OnlineLimits", "OnlineReport", "Policy",
    "Priority", "Resource", "ResourceKind", "SimParams", "SimulationError", "TwoClassWRR",
    "arbitrate", "execute_decode", "execute_prefill_de_path", "execute_prefill_pe_path",
    "resolve_scheduler", "run_offline", "run_online",
]
