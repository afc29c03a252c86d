"""Raft with an optional fast commit track, plus a seeded test bench.

The protocol lives in pure state machines (`RaftNode`, `FastRaftNode`)
driven by a discrete-event simulator (`Simulation`).  The harness runs
workloads, audits safety, sweeps loss rates, and fuzzes fault
schedules; the explorer enumerates message interleavings outright.
"""

from .core import (
    ClusterConfig,
    EntryStatus,
    InvalidConfigError,
    LogEntry,
    PersistentState,
    classic_quorum_size,
    fast_quorum_size,
)
from .fast import FastRaftNode
from .harness import (
    RunMetrics,
    WorkloadSpec,
    audit_liveness,
    audit_safety,
    fuzz_campaign,
    latency_sweep,
    measure_commit_rounds,
    run_workload,
)
from .node import CommitRecord, RaftNode, Role
from .sim import (
    CrashPlan,
    FixedDelay,
    Partition,
    PerLinkDelay,
    SimConfig,
    Simulation,
    UniformDelay,
)

__version__ = "0.1.0"

__all__ = [
    "ClusterConfig",
    "CommitRecord",
    "CrashPlan",
    "EntryStatus",
    "FastRaftNode",
    "FixedDelay",
    "InvalidConfigError",
    "LogEntry",
    "Partition",
    "PerLinkDelay",
    "PersistentState",
    "RaftNode",
    "Role",
    "RunMetrics",
    "SimConfig",
    "Simulation",
    "UniformDelay",
    "WorkloadSpec",
    "audit_liveness",
    "audit_safety",
    "classic_quorum_size",
    "fast_quorum_size",
    "fuzz_campaign",
    "latency_sweep",
    "measure_commit_rounds",
    "run_workload",
    "__version__",
]
