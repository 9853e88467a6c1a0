"""Simulated machine description and the abstract cost model.

Costs are unitless. Memory accesses are priced on a flat two-tier
distance model (local vs. remote socket); IPIs likewise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass(frozen=True)
class CostParams:
    local_mem: float = 1
    remote_mem: float = 4
    remote_mem_interference: float = 12
    ipi_local: float = 40
    ipi_remote: float = 120
    tlb_hit: float = 0
    # fixed software overheads, not part of the memory model
    syscall_overhead: float = 200
    fault_overhead: float = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"cost {f.name} must be a number, got {value!r}")
            if value < 0:
                raise ConfigError(f"cost {f.name} must be >= 0, got {value}")
        if not self.local_mem <= self.remote_mem <= self.remote_mem_interference:
            raise ConfigError("costs must satisfy local_mem <= remote_mem <= remote_mem_interference")
        if self.ipi_local > self.ipi_remote:
            raise ConfigError("costs must satisfy ipi_local <= ipi_remote")

    @classmethod
    def from_mapping(cls, values: dict[str, float], base: CostParams | None = None) -> CostParams:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown cost parameter(s): {', '.join(unknown)}")
        merged = {f.name: getattr(base or cls(), f.name) for f in fields(cls)}
        merged.update(values)
        return cls(**merged)


@dataclass(frozen=True)
class MachineTopology:
    node_count: int
    cores_per_node: int
    costs: CostParams = field(default_factory=CostParams)

    def __post_init__(self) -> None:
        for name in ("node_count", "cores_per_node"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.costs, CostParams):
            raise ConfigError("costs must be a CostParams instance")

    @property
    def core_count(self) -> int:
        return self.node_count * self.cores_per_node

    def node_of(self, core: int) -> int:
        if not 0 <= core < self.core_count:
            raise ValueError(f"core {core} out of range [0, {self.core_count})")
        return core // self.cores_per_node

    def cores_of(self, node: int) -> range:
        self._check_node(node)
        first = node * self.cores_per_node
        return range(first, first + self.cores_per_node)

    def _check_node(self, node: int) -> None:
        if not 0 <= node < self.node_count:
            raise ValueError(f"node {node} out of range [0, {self.node_count})")


def build_topology(node_count: int = 8, cores_per_node: int = 18,
                   costs: CostParams | None = None) -> MachineTopology:
    """Validated topology; defaults mirror an 8-socket, 18-core-per-socket box."""
    return MachineTopology(node_count, cores_per_node, costs if costs is not None else CostParams())


def access_cost(topo: MachineTopology, from_node: int, to_node: int, interference: bool = False) -> float:
    topo._check_node(from_node)
    topo._check_node(to_node)
    c = topo.costs
    if from_node == to_node:
        return c.local_mem
    return c.remote_mem_interference if interference else c.remote_mem


def ipi_cost(topo: MachineTopology, from_node: int, to_node: int) -> float:
    topo._check_node(from_node)
    topo._check_node(to_node)
    c = topo.costs
    return c.ipi_local if from_node == to_node else c.ipi_remote
