"""Page-table page pool, pure-Python backend.

Every page-table page of every node lives in one pool and is named by an
integer page id. Interior slots hold a child page id (or -1); leaf slots
hold a frame id plus a flag byte (see :mod:`ptsim.pteflags`). Each page
also carries its level, home node, first covered VPN, a ``ring_next``
pointer linking replicas of the same logical page, and a count of
occupied slots.

``ptsim/_store.pyx`` implements the same class in Cython; the two must
agree call for call (tests/test_store_backends.py replays random
operation streams through both).
"""

from __future__ import annotations

from .errors import InvariantViolation
from .pteflags import ACCESSED, DIRTY, PRESENT, PROT_MASK


class PageStore:
    backend = "python"

    def __init__(self, levels: int = 4, bits: int = 9, nodes: int = 1) -> None:
        if not 1 <= levels <= 7 or not 1 <= bits <= 16 or nodes < 1:
            raise ValueError("bad store geometry")
        self.levels = levels
        self.bits = bits
        self.fanout = 1 << bits
        self.nodes = nodes
        self._mask = self.fanout - 1
        self._slots: list[list[int] | None] = []
        self._flags: list[bytearray | None] = []
        self._level: list[int] = []
        self._node: list[int] = []
        self._span: list[int] = []
        self._next: list[int] = []
        self._used: list[int] = []
        self._live: list[bool] = []
        self._free: list[int] = []
        self._node_pages = [0] * nodes
        self._total = 0
        self._walk_local = [0] * levels
        self._walk_remote = [0] * levels

    # -- pool ---------------------------------------------------------------

    def alloc(self, level: int, node: int, span: int) -> int:
        if not 0 <= level < self.levels:
            raise ValueError(f"level {level} out of range")
        if not 0 <= node < self.nodes:
            raise ValueError(f"node {node} out of range")
        fan = self.fanout
        if self._free:
            pid = self._free.pop()
            self._slots[pid] = [-1] * fan
            self._flags[pid] = bytearray(fan)
            self._level[pid] = level
            self._node[pid] = node
            self._span[pid] = span
            self._next[pid] = pid
            self._used[pid] = 0
            self._live[pid] = True
        else:
            pid = len(self._level)
            self._slots.append([-1] * fan)
            self._flags.append(bytearray(fan))
            self._level.append(level)
            self._node.append(node)
            self._span.append(span)
            self._next.append(pid)
            self._used.append(0)
            self._live.append(True)
        self._node_pages[node] += 1
        self._total += 1
        return pid

    def release(self, pid: int) -> None:
        self._check(pid)
        if self._used[pid]:
            raise InvariantViolation(f"page {pid} released with {self._used[pid]} occupied slots")
        if self._next[pid] != pid:
            raise InvariantViolation(f"page {pid} released while still linked in a ring")
        self._live[pid] = False
        self._slots[pid] = None
        self._flags[pid] = None
        self._node_pages[self._node[pid]] -= 1
        self._total -= 1
        self._free.append(pid)

    def _check(self, pid: int) -> None:
        if not 0 <= pid < len(self._live) or not self._live[pid]:
            raise InvariantViolation(f"page {pid} is not live")

    def is_live(self, pid: int) -> bool:
        return 0 <= pid < len(self._live) and self._live[pid]

    def level(self, pid: int) -> int:
        self._check(pid)
        return self._level[pid]

    def node(self, pid: int) -> int:
        self._check(pid)
        return self._node[pid]

    def span(self, pid: int) -> int:
        self._check(pid)
        return self._span[pid]

    def used(self, pid: int) -> int:
        self._check(pid)
        return self._used[pid]

    def ring_next(self, pid: int) -> int:
        self._check(pid)
        return self._next[pid]

    def set_ring_next(self, pid: int, nxt: int) -> None:
        self._check(pid)
        self._check(nxt)
        self._next[pid] = nxt

    def total_pages(self) -> int:
        return self._total

    def pages_on_node(self, node: int) -> int:
        return self._node_pages[node]

    def live_pages(self) -> list[int]:
        return [pid for pid, live in enumerate(self._live) if live]

    @property
    def walk_local(self) -> list[int]:
        return list(self._walk_local)

    @property
    def walk_remote(self) -> list[int]:
        return list(self._walk_remote)

    # -- slots --------------------------------------------------------------

    def child(self, pid: int, idx: int) -> int:
        return self._slots[pid][idx]

    def set_child(self, pid: int, idx: int, child: int) -> None:
        row = self._slots[pid]
        if row[idx] < 0 <= child:
            self._used[pid] += 1
        elif child < 0 <= row[idx]:
            self._used[pid] -= 1
        row[idx] = child

    def entry(self, pid: int, idx: int) -> tuple[int, int]:
        return self._flags[pid][idx], self._slots[pid][idx]

    def set_entry(self, pid: int, idx: int, flags: int, frame: int) -> None:
        fl = self._flags[pid]
        was = fl[idx] & PRESENT
        now = flags & PRESENT
        if now and not was:
            self._used[pid] += 1
        elif was and not now:
            self._used[pid] -= 1
        fl[idx] = flags & 0xFF if now else 0
        self._slots[pid][idx] = frame if now else -1

    def or_flags(self, pid: int, idx: int, bits: int) -> None:
        fl = self._flags[pid]
        if fl[idx] & PRESENT:
            fl[idx] |= bits

    # -- traversal ----------------------------------------------------------

    def walk(self, root: int, vpn: int, node: int, record: bool = True) -> tuple[int, int, int]:
        """Descend from ``root`` toward ``vpn``.

        Returns ``(page, depth, remote)``: the deepest page reached, the
        number of pages read, and how many of those live off ``node``.
        ``depth == levels`` means ``page`` is the leaf (its slot may still
        be empty).
        """
        slots = self._slots
        pnode = self._node
        levels = self.levels
        bits = self.bits
        mask = self._mask
        shift = bits * (levels - 1)
        pid = root
        depth = 0
        remote = 0
        while True:
            if pnode[pid] != node:
                remote += 1
                if record:
                    self._walk_remote[depth] += 1
            elif record:
                self._walk_local[depth] += 1
            depth += 1
            if depth == levels:
                break
            child = slots[pid][(vpn >> shift) & mask]
            if child < 0:
                break
            pid = child
            shift -= bits
        return pid, depth, remote

    def leaf(self, root: int, vpn: int) -> int:
        """Leaf page covering ``vpn`` under ``root``, or -1."""
        slots = self._slots
        bits = self.bits
        mask = self._mask
        shift = bits * (self.levels - 1)
        pid = root
        while shift:
            pid = slots[pid][(vpn >> shift) & mask]
            if pid < 0:
                return -1
            shift -= bits
        return pid

    def mark(self, root: int, vpn: int, bits: int) -> bool:
        pid = self.leaf(root, vpn)
        if pid < 0:
            return False
        fl = self._flags[pid]
        idx = vpn & self._mask
        if not fl[idx] & PRESENT:
            return False
        fl[idx] |= bits
        return True

    # -- bulk leaf operations -----------------------------------------------

    def copy_window(self, src: int, dst: int, lo: int, hi: int) -> int:
        sf = self._flags[src]
        ss = self._slots[src]
        df = self._flags[dst]
        ds = self._slots[dst]
        n = 0
        for i in range(lo, hi):
            f = sf[i]
            if f & PRESENT and not df[i] & PRESENT:
                df[i] = f
                ds[i] = ss[i]
                n += 1
        self._used[dst] += n
        return n

    def clear_range(self, pid: int, lo: int, hi: int) -> int:
        fl = self._flags[pid]
        sl = self._slots[pid]
        n = 0
        for i in range(lo, hi):
            if fl[i] & PRESENT:
                fl[i] = 0
                sl[i] = -1
                n += 1
        self._used[pid] -= n
        return n

    def protect_range(self, pid: int, lo: int, hi: int, prot: int) -> int:
        fl = self._flags[pid]
        prot &= PROT_MASK
        n = 0
        for i in range(lo, hi):
            f = fl[i]
            if f & PRESENT and (f & PROT_MASK) != prot:
                fl[i] = (f & ~PROT_MASK) | prot
                n += 1
        return n

    def count_present(self, pid: int, lo: int, hi: int) -> int:
        fl = self._flags[pid]
        n = 0
        for i in range(lo, hi):
            if fl[i] & PRESENT:
                n += 1
        return n

    def ad_bits(self, pid: int, idx: int) -> int:
        f = self._flags[pid][idx]
        return f & (ACCESSED | DIRTY) if f & PRESENT else 0

    # -- rings ----------------------------------------------------------------

    def ring(self, pid: int) -> list[int]:
        """Members of ``pid``'s ring in ring order, starting at ``pid``."""
        self._check(pid)
        nxt = self._next
        out = [pid]
        cur = nxt[pid]
        while cur != pid:
            if len(out) >= self.nodes:
                raise InvariantViolation(f"ring of page {pid} does not close within {self.nodes} steps")
            out.append(cur)
            cur = nxt[cur]
        return out

    def same_ring(self, a: int, b: int) -> bool:
        nxt = self._next
        cur = a
        for _ in range(self.nodes):
            if cur == b:
                return True
            cur = nxt[cur]
            if cur == a:
                return False
        raise InvariantViolation(f"ring of page {a} does not close")

    def join(self, a: int, b: int) -> bool:
        """Splice the rings of ``a`` and ``b`` together; False if already one ring."""
        self._check(a)
        self._check(b)
        if self.same_ring(a, b):
            return False
        if self._level[a] != self._level[b] or self._span[a] != self._span[b]:
            raise InvariantViolation(f"pages {a} and {b} are not replicas of one logical page")
        nodes_a = {self._node[p] for p in self.ring(a)}
        for p in self.ring(b):
            if self._node[p] in nodes_a:
                raise InvariantViolation(f"joining pages {a} and {b} would put two replicas on node {self._node[p]}")
        na, nb = self._next[a], self._next[b]
        self._next[a] = nb
        self._next[b] = na
        return True

    def unlink(self, pid: int) -> None:
        self._check(pid)
        nxt = self._next
        prev = pid
        while nxt[prev] != pid:
            prev = nxt[prev]
        if prev != pid:
            nxt[prev] = nxt[pid]
            nxt[pid] = pid

    # -- fused fault-path kernels ------------------------------------------------

    def translate(self, root: int, vpn: int, node: int) -> tuple[int, int, int]:
        """Recorded walk; ``(leaf, depth, remote)`` with leaf -1 unless the PTE is present."""
        pid, depth, remote = self.walk(root, vpn, node)
        if depth < self.levels or not self._flags[pid][vpn & self._mask] & PRESENT:
            pid = -1
        return pid, depth, remote

    def touch(self, pid: int, idx: int, bits: int) -> tuple[int, int]:
        """OR ``bits`` into a present PTE and return its ``(flags, frame)``."""
        fl = self._flags[pid]
        if fl[idx] & PRESENT:
            fl[idx] |= bits
        return fl[idx], self._slots[pid][idx]

    def mark_leaf(self, root: int, vpn: int, bits: int) -> int:
        """Like :meth:`mark` but returns the leaf page id (-1 when not present)."""
        pid = self.leaf(root, vpn) if root >= 0 else -1
        if pid < 0:
            return -1
        fl = self._flags[pid]
        idx = vpn & self._mask
        if not fl[idx] & PRESENT:
            return -1
        fl[idx] |= bits
        return pid

    def link_path(self, root: int, vpn: int, place: int, counterpart: int) -> tuple[int, int, int]:
        """Make the path to ``vpn``'s leaf exist under ``root``.

        Missing pages are allocated on ``place``. With ``counterpart >= 0``
        (a root whose path already exists) every page on the path is joined
        to its counterpart's ring. Returns ``(leaf, pages allocated, joins)``.
        """
        bits = self.bits
        mask = self._mask
        shift = bits * (self.levels - 1)
        pid = root
        other = counterpart
        allocated = 0
        links = 0
        for level in range(1, self.levels):
            idx = (vpn >> shift) & mask
            child = self._slots[pid][idx]
            if child < 0:
                child = self.alloc(level, place, (vpn >> shift) << shift)
                self.set_child(pid, idx, child)
                allocated += 1
            pid = child
            shift -= bits
            if other >= 0:
                other = self._slots[other][idx]
                if other < 0:
                    raise InvariantViolation(f"counterpart path for vpn {vpn:#x} ends early")
                if self.join(other, pid):
                    links += 1
        return pid, allocated, links

    def install(self, leaf: int, idx: int, flags: int, frame: int, node: int) -> tuple[int, int]:
        """Write one PTE into every replica in ``leaf``'s ring; ``(replicas, off-node replicas)``."""
        members = self.ring(leaf)
        remote = 0
        for pid in members:
            self.set_entry(pid, idx, flags, frame)
            if self._node[pid] != node:
                remote += 1
        return len(members), remote

    # -- audits ---------------------------------------------------------------

    def check_tree(self, root: int, node_local: bool) -> tuple[int, int]:
        """Validate the radix tree under ``root``; return ``(pages, present PTEs)``."""
        self._check(root)
        if self._level[root] != 0 or self._span[root] != 0:
            raise InvariantViolation(f"root {root} has level {self._level[root]} span {self._span[root]}")
        levels = self.levels
        bits = self.bits
        pages = 0
        present = 0
        stack = [root]
        while stack:
            pid = stack.pop()
            pages += 1
            lvl = self._level[pid]
            row = self._slots[pid]
            fl = self._flags[pid]
            count = 0
            if lvl == levels - 1:
                for i in range(self.fanout):
                    f = fl[i]
                    if f & PRESENT:
                        count += 1
                        if row[i] < 0:
                            raise InvariantViolation(f"page {pid} slot {i}: present PTE without frame")
                    elif f or row[i] != -1:
                        raise InvariantViolation(f"page {pid} slot {i}: stale data in empty PTE")
                present += count
            else:
                child_span = 1 << (bits * (levels - 1 - lvl))
                for i in range(self.fanout):
                    c = row[i]
                    if c < 0:
                        continue
                    count += 1
                    if not self.is_live(c):
                        raise InvariantViolation(f"page {pid} slot {i} points at dead page {c}")
                    if self._level[c] != lvl + 1:
                        raise InvariantViolation(f"page {c} level {self._level[c]} under level {lvl}")
                    if self._span[c] != self._span[pid] + i * child_span:
                        raise InvariantViolation(f"page {c} covers the wrong span")
                    if node_local and self._node[c] != self._node[pid]:
                        raise InvariantViolation(
                            f"page {c} on node {self._node[c]} under page on node {self._node[pid]}")
                    stack.append(c)
            if count != self._used[pid]:
                raise InvariantViolation(f"page {pid} occupancy {self._used[pid]} != actual {count}")
            if lvl and not count:
                raise InvariantViolation(f"empty non-root page {pid} left allocated")
        return pages, present

    def check_rings(self, max_len: int) -> None:
        for pid, live in enumerate(self._live):
            if not live:
                continue
            seen = {self._node[pid]}
            cur = self._next[pid]
            steps = 1
            while cur != pid:
                if steps > max_len:
                    raise InvariantViolation(f"ring of page {pid} does not close within {max_len} steps")
                if not self.is_live(cur):
                    raise InvariantViolation(f"ring of page {pid} reaches dead page {cur}")
                if self._level[cur] != self._level[pid] or self._span[cur] != self._span[pid]:
                    raise InvariantViolation(f"ring of page {pid} mixes logical pages")
                if self._node[cur] in seen:
                    raise InvariantViolation(f"ring of page {pid} has two replicas on node {self._node[cur]}")
                seen.add(self._node[cur])
                cur = self._next[cur]
                steps += 1

    def audit_range(self, rep_root: int, own_root: int, lo: int, hi: int, prot: int) -> int:
        """Check PTEs of one VMA range held by a replica against the owner.

        Every present replica PTE in VPNs ``[lo, hi)`` must be present at the
        owner with the same frame and prot, and prot must equal the VMA's.
        ``own_root`` may be -1 (owner has no tree). Returns the number of
        present PTEs the replica holds in the range.
        """
        mask = self._mask
        span = self.fanout
        prot &= PROT_MASK
        total = 0
        a = lo
        while a < hi:
            b = min(hi, (a & ~mask) + span)
            rleaf = self.leaf(rep_root, a)
            if rleaf >= 0:
                oleaf = self.leaf(own_root, a) if own_root >= 0 else -1
                rf = self._flags[rleaf]
                rs = self._slots[rleaf]
                for v in range(a, b):
                    i = v & mask
                    f = rf[i]
                    if not f & PRESENT:
                        continue
                    total += 1
                    if (f & PROT_MASK) != prot:
                        raise InvariantViolation(f"vpn {v:#x}: PTE prot {f & PROT_MASK:#x} != VMA prot {prot:#x}")
                    if oleaf < 0 or not self._flags[oleaf][i] & PRESENT:
                        raise InvariantViolation(f"vpn {v:#x}: replica PTE present but owner lacks it")
                    of = self._flags[oleaf][i]
                    if self._slots[oleaf][i] != rs[i] or (of & PROT_MASK) != (f & PROT_MASK):
                        raise InvariantViolation(f"vpn {v:#x}: replica PTE disagrees with owner")
            a = b
        return total

    def check_tlb(self, root: int, entries: dict) -> None:
        """Every cached ``vpn -> (frame, prot, dirty)`` must be backed by ``root``'s tree."""
        mask = self._mask
        for vpn, snap in entries.items():
            frame, prot, dirty = snap
            pid = self.leaf(root, vpn) if root >= 0 else -1
            if pid < 0:
                raise InvariantViolation(f"TLB caches vpn {vpn:#x} with no local leaf page")
            i = vpn & mask
            f = self._flags[pid][i]
            if not f & PRESENT:
                raise InvariantViolation(f"TLB caches vpn {vpn:#x} but local PTE is not present")
            if self._slots[pid][i] != frame:
                raise InvariantViolation(f"TLB caches vpn {vpn:#x} with stale frame")
            if prot & ~f & PROT_MASK:
                raise InvariantViolation(f"TLB caches vpn {vpn:#x} with prot wider than the PTE")
            if not f & ACCESSED or (dirty and not f & DIRTY):
                raise InvariantViolation(f"TLB caches vpn {vpn:#x} but PTE lacks A/D bits")

    def audit_vmas(self, roots: list, vmas: list, ring_check: bool, mirror: bool) -> int:
        """Owner-invariant sweep over one process.

        ``roots`` is a list of ``(node, root)``; ``vmas`` of
        ``(lo_vpn, hi_vpn, prot, owner_root, owner_node)``. With
        ``ring_check`` a replica leaf holding PTEs of a VMA must share a
        ring with the owner's leaf; with ``mirror`` the owner must also
        hold nothing the replica lacks. Returns the present PTEs counted
        inside the VMAs over all roots.
        """
        mask = self._mask
        fan = self.fanout
        total = 0
        for lo, hi, prot, own, owner_node in vmas:
            for node, root in roots:
                n = self.audit_range(root, own, lo, hi, prot)
                total += n
                if mirror:
                    self.audit_range(own, root, lo, hi, prot)
                elif ring_check and n and node != owner_node:
                    a = lo
                    while a < hi:
                        b = min(hi, (a & ~mask) + fan)
                        leaf = self.leaf(root, a)
                        if leaf >= 0 and self.count_present(leaf, a & mask, ((b - 1) & mask) + 1):
                            if not self.same_ring(leaf, self.leaf(own, a)):
                                raise InvariantViolation(
                                    f"node {node} holds PTEs for vpn {a:#x} outside the owner's sharer ring")
                        a = b
        return total
