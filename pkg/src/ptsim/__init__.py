"""Trace-driven simulator of page-table replication and TLB shootdowns on NUMA machines.

The public surface is re-exported here; see the submodules for details.
"""

from .errors import ConfigError, InvariantViolation, ProtectionFault, SegmentationFault, SimFault, TraceError
from .metrics import MetricsReport, report_csv
from .mmu import COPIED, FRESH, LOCAL_HIT, CoreTlb, FaultOutcome, Mmu, tlb_lookup
from .policy import Mode, ReplicationPolicy, coherence_targets, prefetch_window, shootdown_targets
from .store import BACKEND, PageStore, available_backends, store_class
from .syscalls import Simulator, TraceEvent
from .topology import CostParams, MachineTopology, access_cost, build_topology, ipi_cost
from .vmem import AddressLayout, ProcessSpace, Vma, vma_lookup
from .workloads import ScenarioSpec, gamma_alloc_size, gen_scenario, parse_trace, serialize_trace

__version__ = "0.1.0"

__all__ = [
    "AddressLayout", "BACKEND", "COPIED", "ConfigError", "CoreTlb", "CostParams", "FRESH", "FaultOutcome",
    "InvariantViolation", "LOCAL_HIT", "MachineTopology", "MetricsReport", "Mmu", "Mode", "PageStore",
    "ProcessSpace", "ProtectionFault", "ReplicationPolicy", "ScenarioSpec", "SegmentationFault", "SimFault",
    "Simulator", "TraceError", "TraceEvent", "Vma", "access_cost", "available_backends", "build_topology",
    "coherence_targets", "gamma_alloc_size", "gen_scenario", "ipi_cost", "parse_trace", "prefetch_window",
    "report_csv", "serialize_trace", "shootdown_targets", "store_class", "tlb_lookup", "vma_lookup",
]
