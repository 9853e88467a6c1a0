"""Whole-system invariant sweeps.

``audit_simulator`` checks, for every process:

* each replica tree is a well-formed radix tree (node-local when replicated);
* every present PTE lies inside a VMA, carries the VMA's prot, and is held
  by the owner's tree with the same frame (the owner invariant);
* eager trees are exact mirrors of each other;
* a lazily copied PTE sits in a leaf that shares a ring with the owner's;
* every cached TLB entry is backed by a present PTE on the core's node with
  at least the cached rights; idle cores cache nothing;
* rings close, never repeat a node, and page counts match the gauges.

Any failure raises :class:`~ptsim.errors.InvariantViolation`.
"""

from __future__ import annotations

from typing import Callable, Sequence

from .errors import InvariantViolation
from .policy import Mode


def _roots(sim, space) -> dict[int, int]:
    if sim.policy.mode is Mode.NONE:
        return {-1: space.single_root} if space.single_root >= 0 else {}
    return space.roots


def audit_simulator(sim) -> None:
    store = sim.store
    mode = sim.policy.mode
    shift = sim.layout.offset_bits
    total = 0
    for space in sim.processes.values():
        roots = _roots(sim, space)
        present_total = 0
        for node, root in roots.items():
            if node >= 0 and store.node(root) != node:
                raise InvariantViolation(f"process {space.pid}: root for node {node} lives on {store.node(root)}")
            pages, present = store.check_tree(root, mode is not Mode.NONE)
            total += pages
            present_total += present
        if mode is Mode.EAGER and roots and len(roots) != sim.topo.node_count:
            raise InvariantViolation(f"process {space.pid}: eager replication with {len(roots)} roots")

        if mode is Mode.NONE:
            vmas = [(v.start >> shift, (v.start + v.length) >> shift, v.prot, space.single_root, v.owner)
                    for v in space.vmas]
        else:
            get = space.roots.get
            vmas = [(v.start >> shift, (v.start + v.length) >> shift, v.prot, get(v.owner, -1), v.owner)
                    for v in space.vmas]
        try:
            in_vmas = store.audit_vmas(list(roots.items()), vmas, mode is Mode.LAZY, mode is Mode.EAGER)
        except InvariantViolation as exc:
            raise InvariantViolation(f"process {space.pid}: {exc}") from None
        if in_vmas != present_total:
            raise InvariantViolation(
                f"process {space.pid}: {present_total - in_vmas} present PTEs lie outside every VMA")

        for t in space.threads.values():
            root = roots.get(-1 if mode is Mode.NONE else t.node, -1)
            store.check_tlb(root, sim.mmu.tlbs[t.core].entries)

    for core, owner in enumerate(sim.core_thread):
        if owner is None and sim.mmu.tlbs[core].entries:
            raise InvariantViolation(f"idle core {core} still caches translations")

    if total != store.total_pages():
        raise InvariantViolation(f"{store.total_pages() - total} page-table pages are unreachable")
    gauges = sim.report.gauges
    if gauges["pt_pages_total"] != total:
        raise InvariantViolation("footprint gauge disagrees with the store")
    for n in range(sim.topo.node_count):
        if gauges[f"pt_pages_node{n}"] != store.pages_on_node(n):
            raise InvariantViolation(f"footprint gauge for node {n} disagrees with the store")
    store.check_rings(sim.topo.node_count)


def first_violation(make_sim: Callable[[], object], events: Sequence) -> int | None:
    """Replay ``events`` with a full audit; index of the first failing event."""
    sim = make_sim()
    sim.audit_mode = "full"
    for i, ev in enumerate(events):
        try:
            sim.apply(ev)
        except InvariantViolation:
            return i
    return None
