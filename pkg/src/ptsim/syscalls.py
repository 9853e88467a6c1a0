"""Trace-visible operations and the event loop that applies them.

A :class:`Simulator` owns one machine's worth of state: the page store,
per-core TLBs, processes and their threads. Events are applied strictly
in order; a bad event (segfault, unmapping a hole, oversubscribing a
node) is recorded and the run continues.
"""

from __future__ import annotations

import gc
from contextlib import contextmanager
from dataclasses import dataclass, fields
from typing import Iterable, Iterator

from .audit import audit_simulator
from .errors import InvariantViolation, SimFault, TraceError
from .metrics import MetricsReport
from .mmu import DEFAULT_TLB_CAPACITY, Mmu
from .policy import ReplicationPolicy, target_cores
from .topology import MachineTopology
from .vmem import AddressLayout, ProcessSpace, Thread, parse_prot

OPS = ("spawn", "exit", "migrate", "mmap", "munmap", "mprotect", "access", "spin")


@dataclass(slots=True)
class TraceEvent:
    seq: int
    proc: int
    thread: int
    op: str
    node: int | None = None
    length: int | None = None
    prot: str | None = None
    addr: int | None = None
    vma: int | None = None
    kind: str | None = None
    iters: int | None = None
    data_node: int | None = None
    pt_node: int | None = None


EVENT_FIELDS = tuple(f.name for f in fields(TraceEvent))


@contextmanager
def paused_gc() -> Iterator[None]:
    """Suspend the cyclic collector around bulk work that creates no cycles."""
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


def sharer_stats(store) -> dict[str, int]:
    """Largest root ring and smallest/largest non-root ring over live pages."""
    root_max = 0
    lo = hi = 0
    for pid in store.live_pages():
        size = len(store.ring(pid))
        if store.level(pid) == 0:
            root_max = max(root_max, size)
        else:
            lo = size if not hi else min(lo, size)
            hi = max(hi, size)
    return {"sharers_root_max": root_max, "sharers_nonroot_min": lo, "sharers_nonroot_max": hi}


class Simulator:
    """Applies trace events to simulated processes on one machine."""

    def __init__(self, topo: MachineTopology, policy: ReplicationPolicy,
                 layout: AddressLayout | None = None, *,
                 tlb_capacity: int | None = DEFAULT_TLB_CAPACITY, audit: str = "off",
                 audit_every: int = 64, interference: bool = False,
                 store_cls: type | None = None, summaries: bool = False,
                 meta: dict | None = None) -> None:
        if audit not in ("off", "sampled", "full"):
            raise ValueError(f"unknown audit mode {audit!r}")
        self.topo = topo
        self.policy = policy
        self.layout = layout or AddressLayout()
        if audit == "full":
            tlb_capacity = None
        run_meta = {"policy": policy.label(), "prefetch": policy.degree,
                    "tlb_opt": "on" if policy.filtering else "off"}
        run_meta.update(meta or {})
        self.report = MetricsReport(topo.node_count, self.layout.levels, run_meta)
        self.mmu = Mmu(topo, policy, self.layout, self.report, tlb_capacity, interference, store_cls)
        self.store = self.mmu.store
        self.c = self.report.counters
        self.processes: dict[int, ProcessSpace] = {}
        self.core_thread: list[tuple[int, int] | None] = [None] * topo.core_count
        self._rr = [0] * topo.node_count
        self.audit_mode = audit
        self.audit_every = audit_every
        self.errors: list[tuple[int, str]] = []
        self.summaries: list[dict] | None = [] if summaries else None
        self.events_applied = 0
        self.last_seq: int | None = None
        self._page = self.layout.page_size
        self._max_vaddr = self.layout.max_vaddr
        self._access = self.mmu.access
        self._op_keys = {op: ("calls_" + op, "opcost_" + op) for op in OPS}

    # -- helpers -----------------------------------------------------------------

    def process(self, proc: int, create: bool = False) -> ProcessSpace:
        space = self.processes.get(proc)
        if space is None:
            if not create:
                raise TraceError(f"unknown process {proc}")
            space = self.processes[proc] = ProcessSpace(proc, self.layout)
        return space

    def thread(self, space: ProcessSpace, tid: int) -> Thread:
        t = space.threads.get(tid)
        if t is None:
            raise TraceError(f"process {space.pid} has no thread {tid}")
        return t

    def _take_core(self, node: int) -> int:
        topo = self.topo
        try:
            cores = topo.cores_of(node)
        except ValueError as exc:
            raise TraceError(str(exc)) from None
        n = topo.cores_per_node
        start = self._rr[node]
        for k in range(n):
            off = (start + k) % n
            core = cores[off]
            if self.core_thread[core] is None:
                self._rr[node] = (off + 1) % n
                return core
        raise TraceError(f"no free core on node {node}")

    def _range(self, ev: TraceEvent) -> tuple[int, int]:
        if ev.addr is None or ev.length is None:
            raise TraceError(f"{ev.op} needs addr and len")
        if ev.addr % self._page:
            raise TraceError(f"{ev.op} address {ev.addr:#x} is not page aligned")
        if ev.length <= 0:
            raise TraceError(f"{ev.op} length must be positive")
        end = ev.addr + -(-ev.length // self._page) * self._page
        return ev.addr, end

    def _shootdown(self, space: ProcessSpace, thread: Thread, sharers: set[int], lo: int, hi: int) -> None:
        targets = target_cores(space, sharers, self.policy, thread.core)
        shift = self.layout.offset_bits
        self.mmu.apply_shootdown(thread.core, targets, lo >> shift, hi >> shift)

    def _syscall_overhead(self) -> None:
        self.mmu.charge("syscall", self.topo.costs.syscall_overhead)

    # -- operations -------------------------------------------------------------

    def op_thread(self, space: ProcessSpace, tid: int, spawn_node: int | None) -> Thread | None:
        """Spawn ``tid`` on ``spawn_node``, or retire it when ``spawn_node`` is None."""
        if spawn_node is not None:
            if tid in space.threads:
                raise TraceError(f"thread {tid} already exists in process {space.pid}")
            core = self._take_core(spawn_node)
            t = Thread(tid, spawn_node, core)
            space.threads[tid] = t
            self.core_thread[core] = (space.pid, tid)
            return t
        t = self.thread(space, tid)
        self.mmu.drop_tlb(t.core)
        self.core_thread[t.core] = None
        del space.threads[tid]
        return None

    def op_migrate(self, space: ProcessSpace, thread: Thread, new_node: int) -> Thread:
        old = thread.core
        self.core_thread[old] = None
        try:
            core = self._take_core(new_node)
        except TraceError:
            self.core_thread[old] = (space.pid, thread.tid)
            raise
        self.mmu.drop_tlb(old)
        thread.node = new_node
        thread.core = core
        self.core_thread[core] = (space.pid, thread.tid)
        return thread

    def op_mmap(self, space: ProcessSpace, thread: Thread, length: int, prot: int,
                addr: int | None = None, owner: int | None = None,
                data_node: int | None = None, pt_node: int | None = None):
        for name, n in (("owner", owner), ("data_node", data_node), ("pt_node", pt_node)):
            if n is not None and not 0 <= n < self.topo.node_count:
                raise TraceError(f"mmap {name} {n} out of range")
        self._syscall_overhead()
        try:
            return space.map(length, prot, thread.node if owner is None else owner, addr, data_node, pt_node)
        except ValueError as exc:
            raise TraceError(str(exc)) from None

    def op_munmap(self, space: ProcessSpace, thread: Thread, lo: int, hi: int) -> int:
        if not space.covers(lo, hi):
            raise TraceError(f"munmap of [{lo:#x}, {hi:#x}) covers unmapped addresses")
        self._syscall_overhead()
        space.split_at(lo)
        space.split_at(hi)
        shift = self.layout.offset_bits
        changed = 0
        sharers: set[int] = set()
        for vma in space.overlapping(lo, hi):
            n, s = self.mmu.update_range(space, vma, vma.start >> shift, vma.end >> shift, thread.node, None)
            changed += n
            sharers |= s
            space.remove(vma)
        if changed:
            self._shootdown(space, thread, sharers, lo, hi)
        return changed

    def op_mprotect(self, space: ProcessSpace, thread: Thread, lo: int, hi: int, prot: int) -> int:
        if not space.covers(lo, hi):
            raise TraceError(f"mprotect of [{lo:#x}, {hi:#x}) covers unmapped addresses")
        self._syscall_overhead()
        space.split_at(lo)
        space.split_at(hi)
        shift = self.layout.offset_bits
        changed = 0
        sharers: set[int] = set()
        for vma in space.overlapping(lo, hi):
            vma.prot = prot
            n, s = self.mmu.update_range(space, vma, vma.start >> shift, vma.end >> shift, thread.node, prot)
            changed += n
            sharers |= s
        space.merge_around(lo, hi)
        if changed:
            self._shootdown(space, thread, sharers, lo, hi)
        return changed

    def op_access(self, space: ProcessSpace, thread: Thread, vaddr: int, write: bool) -> None:
        if not 0 <= vaddr < self.layout.max_vaddr:
            raise TraceError(f"address {vaddr:#x} outside the address space")
        self.mmu.access(space, thread, vaddr, write)

    # -- event loop ---------------------------------------------------------------

    def _dispatch(self, ev: TraceEvent) -> None:
        op = ev.op
        if op == "spawn":
            if ev.node is None:
                raise TraceError("spawn needs a node")
            self.op_thread(self.process(ev.proc, create=True), ev.thread, ev.node)
            return
        space = self.process(ev.proc)
        if op == "exit":
            self.op_thread(space, ev.thread, None)
            return
        t = self.thread(space, ev.thread)
        if op == "access":
            if ev.addr is None or ev.kind not in ("r", "w"):
                raise TraceError("access needs addr and kind r|w")
            self.op_access(space, t, ev.addr, ev.kind == "w")
        elif op == "mmap":
            if ev.length is None or ev.length <= 0:
                raise TraceError("mmap length must be positive")
            try:
                prot = parse_prot(ev.prot or "rw")
            except ValueError as exc:
                raise TraceError(str(exc)) from None
            self.op_mmap(space, t, ev.length, prot, ev.addr, ev.node, ev.data_node, ev.pt_node)
        elif op == "munmap":
            if ev.vma is not None:
                vma = space.vma_by_id(ev.vma)
                if vma is None:
                    raise TraceError(f"munmap of unknown vma {ev.vma}")
                self.op_munmap(space, t, vma.start, vma.end)
            else:
                self.op_munmap(space, t, *self._range(ev))
        elif op == "mprotect":
            try:
                prot = parse_prot(ev.prot or "")
            except ValueError as exc:
                raise TraceError(str(exc)) from None
            self.op_mprotect(space, t, *self._range(ev), prot)
        elif op == "migrate":
            if ev.node is None:
                raise TraceError("migrate needs a node")
            self.op_migrate(space, t, ev.node)
        elif op == "spin":
            pass
        else:
            raise TraceError(f"unknown op {op!r}")

    def _fast_access(self, ev: TraceEvent) -> None:
        """``_dispatch`` for an access event, with the same checks in the same order."""
        space = self.processes.get(ev.proc)
        if space is None:
            raise TraceError(f"unknown process {ev.proc}")
        t = space.threads.get(ev.thread)
        if t is None:
            raise TraceError(f"process {space.pid} has no thread {ev.thread}")
        addr = ev.addr
        kind = ev.kind
        if addr is None or (kind != "r" and kind != "w"):
            raise TraceError("access needs addr and kind r|w")
        if not 0 <= addr < self._max_vaddr:
            raise TraceError(f"address {addr:#x} outside the address space")
        self._access(space, t, addr, kind == "w")

    def apply(self, ev: TraceEvent) -> dict | None:
        """Apply one event; returns its summary when summaries are enabled."""
        seq = ev.seq
        if self.last_seq is not None and seq <= self.last_seq:
            raise TraceError(f"seq {seq} does not increase (previous {self.last_seq})")
        self.last_seq = seq
        c = self.c
        before = None
        if self.summaries is not None:
            self.finish(sharers=False)
            before = dict(c)
        cost0 = c["cost_total"]
        error = None
        op = ev.op
        try:
            if op == "access":
                self._fast_access(ev)
            else:
                self._dispatch(ev)
        except (SimFault, TraceError) as exc:
            error = str(exc)
            c["trace_errors"] += 1
            self.errors.append((seq, error))
        keys = self._op_keys.get(op)
        if keys is not None:
            c[keys[0]] += 1
            c[keys[1]] += c["cost_total"] - cost0
        c["events"] += 1
        self.events_applied += 1
        if self.audit_mode != "off":
            if self.audit_mode == "full" or self.events_applied % self.audit_every == 0:
                self.audit(ev)
        if before is None:
            return None
        self.finish(sharers=False)
        summary = {"seq": ev.seq, "op": ev.op, "cost": c["cost_total"] - cost0,
                   "delta": {k: v - before[k] for k, v in c.items() if v != before[k]}}
        if error:
            summary["error"] = error
        self.summaries.append(summary)
        return summary

    def audit(self, ev: TraceEvent | None = None) -> None:
        try:
            audit_simulator(self)
        except InvariantViolation as exc:
            exc.event_index = self.events_applied - 1
            exc.seq = ev.seq if ev is not None else None
            raise

    def run(self, events: Iterable[TraceEvent]) -> MetricsReport:
        apply = self.apply
        with paused_gc():
            for ev in events:
                apply(ev)
        if self.audit_mode == "sampled":
            self.audit(None)
        return self.finish()

    def finish(self, sharers: bool = True) -> MetricsReport:
        """Fold the store's per-level walk histograms (and ring sizes) into the report."""
        c = self.c
        for i, n in enumerate(self.store.walk_local):
            c[f"walk_l{i}_local"] = n
        for i, n in enumerate(self.store.walk_remote):
            c[f"walk_l{i}_remote"] = n
        if sharers:
            self.report.gauges.update(sharer_stats(self.store))
        return self.report
