"""Shared fixtures and small trace-building helpers."""

from __future__ import annotations

import os

import pytest
from hypothesis import HealthCheck, settings

from ptsim.policy import ReplicationPolicy
from ptsim.store import available_backends, store_class
from ptsim.syscalls import Simulator, TraceEvent
from ptsim.topology import build_topology
from ptsim.vmem import MMAP_BASE

PAGE = 4096

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

BACKENDS = available_backends()


@pytest.fixture(params=BACKENDS)
def backend(request) -> str:
    return request.param


@pytest.fixture
def store_cls(backend):
    return store_class(backend)


class Trace:
    """Hand-written trace builder: ``t("spawn", 0, node=1)`` appends one event."""

    def __init__(self, proc: int = 0) -> None:
        self.proc = proc
        self.events: list[TraceEvent] = []

    def __call__(self, op: str, thread: int, **kw) -> TraceEvent:
        ev = TraceEvent(len(self.events) + 1, self.proc, thread, op, **kw)
        self.events.append(ev)
        return ev

    def mmap(self, thread: int, pages: int, addr: int, prot: str = "rw", **kw) -> int:
        self("mmap", thread, length=pages * PAGE, prot=prot, addr=addr, **kw)
        return addr

    def access(self, thread: int, addr: int, kind: str = "r") -> TraceEvent:
        return self("access", thread, addr=addr, kind=kind)


def make_sim(nodes: int = 2, cores: int = 2, policy: str = "lazy", **kw) -> Simulator:
    kw.setdefault("audit", "full")
    return Simulator(build_topology(nodes, cores), ReplicationPolicy.parse(policy), **kw)


def run_events(sim: Simulator, events) -> Simulator:
    for ev in events:
        sim.apply(ev)
    return sim


def leaf_of(sim: Simulator, node: int, vaddr: int, proc: int = 0) -> int:
    """Leaf page translating ``vaddr`` in ``node``'s tree (-1 if absent)."""
    space = sim.processes[proc]
    root = sim.mmu.root_for(space, node)
    if root < 0:
        return -1
    return sim.store.leaf(root, vaddr >> 12)


# 2 MB aligned so a VMA starting here begins a fresh leaf page
BASE = MMAP_BASE
LEAF_BYTES = 512 * PAGE

# scenario parameters small enough for quick end-to-end replays
SMALL = {
    "mprotect_loop": {"spinners_per_socket": 1, "iters": 50},
    "munmap_loop": {"spinners_per_socket": 1, "iters": 50},
    "touch_once_traversal": {"size": 8 << 20, "passes": 2},
    "malloc_stateless": {"iters": 5, "mean": 200_000.0},
    "malloc_stateful": {"live": 8, "iters": 8, "mean": 200_000.0},
    "webserver_churn": {"iters": 10},
    "kv_churn": {"iters": 50, "slice_pages": 64},
    "partitioned": {"pages_per_node": 300},
    "migration": {"size": 4 << 20},
}
