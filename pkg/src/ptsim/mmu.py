"""Per-core TLBs, page walks, the fault path, shootdowns and A/D aggregation.

All page-table pages of every process live in one :class:`PageStore`.
Each :class:`Mmu` charges its work into a :class:`MetricsReport`.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import NamedTuple

from .errors import InvariantViolation, ProtectionFault, SegmentationFault
from .metrics import MetricsReport
from .policy import Mode, ReplicationPolicy, prefetch_window
from .pteflags import ACCESSED, DIRTY, PRESENT, PROT_MASK, PROT_R, PROT_W
from .store import PageStore
from .topology import MachineTopology
from .vmem import AddressLayout, ProcessSpace, Thread, Vma

LOCAL_HIT = "LocalHit"
COPIED = "CopiedFromOwner"
FRESH = "FreshAllocation"

DEFAULT_TLB_CAPACITY = 1024


class FaultOutcome(NamedTuple):
    kind: str
    copied_count: int
    charged: float


class CoreTlb:
    """LRU cache of ``vpn -> (frame, prot, dirty)`` for one core."""

    __slots__ = ("core", "capacity", "entries")

    def __init__(self, core: int, capacity: int | None = DEFAULT_TLB_CAPACITY) -> None:
        if capacity is not None and capacity < 1:
            raise ValueError("TLB capacity must be positive")
        self.core = core
        self.capacity = capacity
        self.entries: OrderedDict[int, tuple[int, int, bool]] = OrderedDict()

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, vpn: int) -> bool:
        return vpn in self.entries

    def lookup(self, vpn: int):
        snap = self.entries.get(vpn)
        if snap is not None:
            self.entries.move_to_end(vpn)
        return snap

    def insert(self, vpn: int, snap: tuple[int, int, bool]) -> int:
        """Cache ``snap``; returns how many entries were evicted."""
        e = self.entries
        e[vpn] = snap
        e.move_to_end(vpn)
        if self.capacity is not None and len(e) > self.capacity:
            e.popitem(last=False)
            return 1
        return 0

    def invalidate(self, lo: int, hi: int) -> int:
        """Drop cached VPNs in ``[lo, hi)``."""
        e = self.entries
        if not e:
            return 0
        if hi - lo <= len(e):
            n = 0
            for v in range(lo, hi):
                if e.pop(v, None) is not None:
                    n += 1
            return n
        doomed = [v for v in e if lo <= v < hi]
        for v in doomed:
            del e[v]
        return len(doomed)

    def flush(self) -> int:
        n = len(self.entries)
        self.entries.clear()
        return n


def tlb_lookup(tlb: CoreTlb, vpn: int):
    """Snapshot for ``vpn`` (refreshing its LRU slot) or None on a miss."""
    return tlb.lookup(vpn)


class Mmu:
    def __init__(self, topo: MachineTopology, policy: ReplicationPolicy,
                 layout: AddressLayout | None = None, report: MetricsReport | None = None,
                 tlb_capacity: int | None = DEFAULT_TLB_CAPACITY, interference: bool = False,
                 store_cls: type | None = None) -> None:
        self.topo = topo
        self.policy = policy
        self.layout = layout or AddressLayout()
        self.levels = self.layout.levels
        self.store = (store_cls or PageStore)(self.layout.levels, self.layout.bits_per_level, topo.node_count)
        self.report = report or MetricsReport(topo.node_count, self.layout.levels)
        self.c = self.report.counters
        self.tlbs = [CoreTlb(core, tlb_capacity) for core in range(topo.core_count)]
        self.frame_node: list[int] = []
        self.live_frames = 0
        costs = topo.costs
        self.local_cost = costs.local_mem
        self.remote_cost = costs.remote_mem_interference if interference else costs.remote_mem
        self.interference = interference
        self._mask = self.layout.fanout - 1
        self._bits = self.layout.bits_per_level
        self._pshift = self.layout.offset_bits
        kernel = getattr(self.store, "access_kernel", None)
        if kernel is not None:
            # compiled twin of access(); same counters, same state changes
            self.access = kernel(self).access

    # -- cost helpers -----------------------------------------------------------

    def mem_cost(self, a: int, b: int) -> float:
        return self.local_cost if a == b else self.remote_cost

    def charge(self, category: str, amount: float) -> None:
        c = self.c
        c["cost_" + category] += amount
        c["cost_total"] += amount

    # -- page-table plumbing ------------------------------------------------------

    def _account_pages(self, node: int, n: int, initiator: int) -> None:
        """Book ``n`` freshly allocated page-table pages on ``node``."""
        self.report.record("pt_pages", n, node)
        self.c["pt_allocs"] += n
        self.charge("pt_alloc", n * self.mem_cost(initiator, node))

    def _new_page(self, level: int, node: int, span: int, initiator: int) -> int:
        pid = self.store.alloc(level, node, span)
        self._account_pages(node, 1, initiator)
        return pid

    def _free_page(self, pid: int) -> None:
        store = self.store
        node = store.node(pid)
        store.unlink(pid)
        store.release(pid)
        self.report.record("pt_pages", -1, node)
        self.c["pt_frees"] += 1

    def _join(self, a: int, b: int) -> None:
        if self.store.join(a, b):
            self.c["ring_links"] += 1

    def root_for(self, space: ProcessSpace, node: int) -> int:
        if self.policy.mode is Mode.NONE:
            return space.single_root
        return space.roots.get(node, -1)

    def ensure_root(self, space: ProcessSpace, node: int, initiator: int | None = None) -> int:
        """Root consulted by walks on ``node``, created on first use."""
        initiator = node if initiator is None else initiator
        mode = self.policy.mode
        if mode is Mode.NONE:
            if space.single_root < 0:
                space.single_root = self._new_page(0, node, 0, initiator)
            return space.single_root
        roots = space.roots
        pid = roots.get(node, -1)
        if pid >= 0:
            return pid
        if mode is Mode.EAGER:
            first = -1
            for n in range(self.topo.node_count):
                roots[n] = self._new_page(0, n, 0, initiator)
                if first >= 0:
                    self._join(first, roots[n])
                else:
                    first = roots[n]
            return roots[node]
        ref = next(iter(roots.values()), -1)
        pid = self._new_page(0, node, 0, initiator)
        if ref >= 0:
            # the new root starts as a copy of an existing one
            self.charge("pt_alloc", self.mem_cost(node, self.store.node(ref)))
            self._join(ref, pid)
        roots[node] = pid
        return pid

    def ensure_path(self, root: int, vpn: int, place: int, initiator: int, counterpart: int = -1) -> int:
        """Leaf page for ``vpn`` under ``root``, allocating missing levels on ``place``.

        With ``counterpart`` (another node's root whose path already exists)
        each page on the path is joined to its counterpart's ring.
        """
        leaf, allocated, links = self.store.link_path(root, vpn, place, counterpart)
        if allocated:
            self._account_pages(place, allocated, initiator)
        if links:
            self.c["ring_links"] += links
        return leaf

    def _ensure_path_eager(self, space: ProcessSpace, vpn: int, initiator: int) -> int:
        """Allocate missing levels on every node at once; return ``initiator``'s leaf."""
        store = self.store
        n_nodes = self.topo.node_count
        cur = [space.roots[n] for n in range(n_nodes)]
        bits = self._bits
        mask = self._mask
        shift = bits * (self.levels - 1)
        for level in range(1, self.levels):
            idx = (vpn >> shift) & mask
            nxt = [store.child(p, idx) for p in cur]
            if nxt[0] < 0:
                span = (vpn >> shift) << shift
                for n in range(n_nodes):
                    nxt[n] = self._new_page(level, n, span, initiator)
                    store.set_child(cur[n], idx, nxt[n])
                    if n:
                        self._join(nxt[0], nxt[n])
            cur = nxt
            shift -= bits
        return cur[initiator]

    def prune(self, root: int, vpn: int) -> int:
        """Free empty pages on ``vpn``'s path, leaf upward; returns pages freed."""
        store = self.store
        bits = self._bits
        mask = self._mask
        shift = bits * (self.levels - 1)
        path = []
        pid = root
        while shift >= 0 and pid >= 0:
            idx = (vpn >> shift) & mask
            path.append((pid, idx))
            if shift == 0:
                break
            pid = store.child(pid, idx)
            shift -= bits
        if pid < 0:
            return 0
        freed = 0
        for depth in range(len(path) - 1, 0, -1):
            page = path[depth][0]
            if store.used(page):
                break
            parent, idx = path[depth - 1]
            store.set_child(parent, idx, -1)
            self._free_page(page)
            freed += 1
        return freed

    # -- translation ---------------------------------------------------------------

    def walk(self, space: ProcessSpace, node: int, vaddr: int):
        """Walk ``node``'s tree; returns ``(leaf page, present)``.

        The leaf page is -1 when the walk stopped above the leaf level.
        """
        root = self.root_for(space, node)
        if root < 0:
            return -1, False
        vpn = vaddr >> self._pshift
        return self._walk(root, vpn, node)

    def _walk(self, root: int, vpn: int, node: int):
        store = self.store
        pid, depth, remote = store.walk(root, vpn, node)
        c = self.c
        c["walks"] += 1
        cost = (depth - remote) * self.local_cost + remote * self.remote_cost
        c["cost_walk"] += cost
        c["cost_total"] += cost
        if depth < self.levels:
            return -1, False
        return pid, bool(store.entry(pid, vpn & self._mask)[0] & PRESENT)

    def access(self, space: ProcessSpace, thread: Thread, vaddr: int, write: bool) -> None:
        """One load or store by ``thread``; raises a :class:`SimFault` on bad access."""
        vpn = vaddr >> self._pshift
        c = self.c
        tlb = self.tlbs[thread.core]
        entries = tlb.entries
        snap = entries.get(vpn)
        node = thread.node
        store = self.store
        if snap is not None and (not write or snap[1] & PROT_W):
            entries.move_to_end(vpn)
            c["tlb_hits"] += 1
            frame = snap[0]
            cost = self.topo.costs.tlb_hit
            if write and not snap[2]:
                # first store through a clean translation: hardware sets D
                leaf = store.mark_leaf(self.root_for(space, node), vpn, DIRTY)
                if leaf < 0:
                    raise InvariantViolation(f"TLB entry for vpn {vpn:#x} has no backing PTE")
                entries[vpn] = (frame, snap[1], True)
                cost += self.mem_cost(node, store.node(leaf))
            c["cost_tlb"] += cost
            c["cost_total"] += cost
        else:
            c["tlb_misses"] += 1
            vma = space.find(vaddr)
            if vma is None:
                c["faults_segv"] += 1
                raise SegmentationFault(vaddr)
            if not vma.prot & (PROT_W if write else PROT_R):
                c["faults_prot"] += 1
                raise ProtectionFault(vaddr)
            root = self.root_for(space, node)
            leaf = -1
            if root >= 0:
                leaf, depth, remote = store.translate(root, vpn, node)
                c["walks"] += 1
                cost = (depth - remote) * self.local_cost + remote * self.remote_cost
                c["cost_walk"] += cost
                c["cost_total"] += cost
            if leaf < 0:
                leaf = self._fault(space, thread, vma, vpn)[1]
            flags, frame = store.touch(leaf, vpn & self._mask, ACCESSED | DIRTY if write else ACCESSED)
            if tlb.insert(vpn, (frame, flags & PROT_MASK, bool(flags & DIRTY))):
                c["tlb_evictions"] += 1
        cost = self.local_cost if self.frame_node[frame] == node else self.remote_cost
        c["cost_data"] += cost
        c["cost_total"] += cost

    # -- fault path ------------------------------------------------------------------

    def handle_fault(self, space: ProcessSpace, thread: Thread, vaddr: int, write: bool = False) -> FaultOutcome:
        """Resolve a missing translation for ``vaddr`` on ``thread``'s node.

        Also sets A (and D for writes) and fills the TLB, like the hardware
        retry after the handler returns.
        """
        vma = space.find(vaddr)
        if vma is None:
            self.c["faults_segv"] += 1
            raise SegmentationFault(vaddr)
        if not vma.prot & (PROT_W if write else PROT_R):
            self.c["faults_prot"] += 1
            raise ProtectionFault(vaddr)
        vpn = vaddr >> self._pshift
        node = thread.node
        before = self.c["cost_total"]
        root = self.root_for(space, node)
        leaf = self.store.leaf(root, vpn) if root >= 0 else -1
        if leaf >= 0 and self.store.entry(leaf, vpn & self._mask)[0] & PRESENT:
            self.c["faults_local_hit"] += 1
            outcome = (LOCAL_HIT, 0)
        else:
            outcome, leaf = self._fault(space, thread, vma, vpn)
        idx = vpn & self._mask
        self.store.or_flags(leaf, idx, ACCESSED | DIRTY if write else ACCESSED)
        flags, frame = self.store.entry(leaf, idx)
        if self.tlbs[thread.core].insert(vpn, (frame, flags & PROT_MASK, bool(flags & DIRTY))):
            self.c["tlb_evictions"] += 1
        return FaultOutcome(outcome[0], outcome[1], self.c["cost_total"] - before)

    def _fault(self, space: ProcessSpace, thread: Thread, vma: Vma, vpn: int):
        """Install a translation for ``vpn`` on the thread's node.

        Returns ``((kind, copied), local leaf page)``.
        """
        c = self.c
        overhead = self.topo.costs.fault_overhead
        c["cost_fault"] += overhead
        c["cost_total"] += overhead
        node = thread.node
        mode = self.policy.mode
        store = self.store
        idx = vpn & self._mask
        if mode is Mode.NONE:
            place = vma.pt_node if vma.pt_node is not None else node
            root = self.ensure_root(space, place, node)
            leaf = self.ensure_path(root, vpn, place, node)
            self._install(vma, leaf, idx, node)
            return (FRESH, 0), leaf
        if mode is Mode.EAGER:
            self.ensure_root(space, node)
            leaf = self._ensure_path_eager(space, vpn, node)
            self._install(vma, leaf, idx, node)
            return (FRESH, 0), leaf

        local_root = self.ensure_root(space, node)
        owner = vma.owner
        if owner == node:
            leaf = self.ensure_path(local_root, vpn, node, node)
            self._install(vma, leaf, idx, node)
            return (FRESH, 0), leaf

        own_root = self.ensure_root(space, owner, node)
        c["owner_consults"] += 1
        opid, depth, remote = store.walk(own_root, vpn, node, False)
        cost = (depth - remote) * self.local_cost + remote * self.remote_cost
        c["cost_fault"] += cost
        c["cost_total"] += cost
        if depth == self.levels and store.entry(opid, idx)[0] & PRESENT:
            leaf = self.ensure_path(local_root, vpn, node, node, own_root)
            t0 = vpn - idx
            window = prefetch_window(idx, self.policy.prefetch_degree, (t0, t0 + self._mask + 1),
                                     (vma.start >> self._pshift, vma.end >> self._pshift))
            n = store.copy_window(opid, leaf, window.start, window.stop)
            if n < 1:
                raise InvariantViolation(f"copy from owner installed nothing for vpn {vpn:#x}")
            c["faults_copied"] += 1
            c["pte_copies"] += n
            cost = n * self.local_cost
            c["cost_fault"] += cost
            c["cost_total"] += cost
            return (COPIED, n), leaf
        oleaf = self.ensure_path(own_root, vpn, owner, node)
        leaf = self.ensure_path(local_root, vpn, node, node, own_root)
        self._install(vma, oleaf, idx, node)
        return (FRESH, 0), leaf

    def _install(self, vma: Vma, leaf: int, idx: int, node: int) -> None:
        """Back a fresh frame and write its PTE into every replica in ``leaf``'s ring."""
        c = self.c
        frame = len(self.frame_node)
        self.frame_node.append(vma.data_node if vma.data_node is not None else node)
        self.live_frames += 1
        c["frames_allocated"] += 1
        c["faults_fresh"] += 1
        members, remote = self.store.install(leaf, idx, PRESENT | (vma.prot & PROT_MASK), frame, node)
        cost = (members - remote) * self.local_cost + remote * self.remote_cost
        c["fresh_replica_writes"] += members
        c["cost_fault"] += cost
        c["cost_total"] += cost

    def _charge_updates(self, node: int, pages, category: str) -> None:
        """One coherence write per replica, priced from the initiating node."""
        c = self.c
        store = self.store
        cost = 0
        for pid in pages:
            if store.node(pid) == node:
                c["replica_updates_local"] += 1
                cost += self.local_cost
            else:
                c["replica_updates_remote"] += 1
                cost += self.remote_cost
        c[category] += cost
        c["cost_total"] += cost

    # -- range updates (munmap / mprotect) ------------------------------------

    def owner_root(self, space: ProcessSpace, vma: Vma) -> int:
        if self.policy.mode is Mode.NONE:
            return space.single_root
        return space.roots.get(vma.owner, -1)

    def update_range(self, space: ProcessSpace, vma: Vma, lo: int, hi: int, node: int,
                     prot: int | None) -> tuple[int, set[int]]:
        """Clear (``prot is None``) or re-protect PTEs for VPNs ``[lo, hi)`` of ``vma``.

        Every replica in the owner leaf's ring gets the same change. Returns
        ``(PTEs changed at the owner, sharer nodes of changed leaves)``.
        """
        own = self.owner_root(space, vma)
        if own < 0:
            return 0, set()
        store = self.store
        mask = self._mask
        fan = mask + 1
        changed = 0
        sharers: set[int] = set()
        a = lo
        while a < hi:
            b = min(hi, (a & ~mask) + fan)
            oleaf = store.leaf(own, a)
            if oleaf >= 0:
                i0, i1 = a & mask, ((b - 1) & mask) + 1
                members = store.ring(oleaf) if self.policy.mode is not Mode.NONE else [oleaf]
                if prot is None:
                    n = store.clear_range(oleaf, i0, i1)
                else:
                    n = store.protect_range(oleaf, i0, i1, prot)
                if n:
                    changed += n
                    for pid in members:
                        sharers.add(store.node(pid))
                        if pid != oleaf:
                            if prot is None:
                                store.clear_range(pid, i0, i1)
                            else:
                                store.protect_range(pid, i0, i1, prot)
                    self._charge_updates(node, members, "cost_coherence")
                    if prot is None:
                        for pid in members:
                            if not store.used(pid):
                                pnode = store.node(pid)
                                root = space.single_root if self.policy.mode is Mode.NONE else space.roots[pnode]
                                self.prune(root, a)
            a = b
        if prot is None and changed:
            self.live_frames -= changed
            self.c["frames_freed"] += changed
        return changed, sharers

    # -- shootdowns -------------------------------------------------------------------

    def apply_shootdown(self, initiator_core: int, targets, lo: int, hi: int) -> tuple[int, float]:
        """Invalidate ``[lo, hi)`` on every target core plus the initiator.

        The initiator pays one IPI per target, priced by socket distance.
        """
        c = self.c
        topo = self.topo
        src = topo.node_of(initiator_core)
        inv = self.tlbs[initiator_core].invalidate(lo, hi)
        cost = 0
        for core in sorted(targets):
            if topo.node_of(core) == src:
                c["ipis_local"] += 1
                cost += topo.costs.ipi_local
            else:
                c["ipis_remote"] += 1
                cost += topo.costs.ipi_remote
            inv += self.tlbs[core].invalidate(lo, hi)
        c["shootdowns"] += 1
        c["tlb_invalidations"] += inv
        c["cost_ipi"] += cost
        c["cost_total"] += cost
        return inv, cost

    def drop_tlb(self, core: int) -> int:
        n = self.tlbs[core].flush()
        self.c["tlb_flushes"] += 1
        self.c["tlb_invalidations"] += n
        return n

    # -- accessed / dirty -------------------------------------------------------------

    def aggregate_ad_bits(self, space: ProcessSpace, vpn: int):
        """OR of A/D over every replica of ``vpn``'s PTE, or None if unmapped."""
        vma = space.find(vpn << self._pshift)
        if vma is None:
            return None
        own = self.owner_root(space, vma)
        if own < 0:
            return None
        store = self.store
        leaf = store.leaf(own, vpn)
        idx = vpn & self._mask
        if leaf < 0 or not store.entry(leaf, idx)[0] & PRESENT:
            return None
        bits = 0
        for pid in store.ring(leaf):
            bits |= store.ad_bits(pid, idx)
        return bool(bits & ACCESSED), bool(bits & DIRTY)
