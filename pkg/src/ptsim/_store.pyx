# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Page-table page pool, compiled backend.

Same API and semantics as ``ptsim._store_py.PageStore``; storage is flat
C arrays indexed by page id so walks and range sweeps stay out of the
interpreter.
"""

from libc.stdlib cimport malloc, realloc, free
from libc.string cimport memcpy, memset

from ptsim.errors import InvariantViolation, ProtectionFault, SegmentationFault

cdef enum:
    PRESENT = 0x01
    PROT_R = 0x02
    PROT_W = 0x04
    PROT_MASK = 0x0E
    ACCESSED = 0x10
    DIRTY = 0x20
    MAX_LEVELS = 8


cdef inline bint _slots_empty(long long *sl) noexcept nogil:
    # empty slots hold -1 (all bits set), so the AND of eight is -1 only if all are empty
    return (sl[0] & sl[1] & sl[2] & sl[3] & sl[4] & sl[5] & sl[6] & sl[7]) == -1


cdef inline bint _block_empty(long long *sl, unsigned char *fl) noexcept nogil:
    cdef unsigned long long w = 0
    memcpy(&w, fl, 8)
    return w == 0 and _slots_empty(sl)


cdef class PageStore:
    cdef readonly int levels, bits, fanout, nodes
    cdef long long mask
    cdef long long *slots
    cdef unsigned char *flg
    cdef int *lvl
    cdef int *nod
    cdef long long *spn
    cdef int *nxt
    cdef int *occ
    cdef char *live
    cdef int *freelist
    cdef int nfree
    cdef int cap
    cdef int top
    cdef long long *node_pages
    cdef long long total
    cdef long long hist_local[MAX_LEVELS]
    cdef long long hist_remote[MAX_LEVELS]

    backend = "cython"

    @staticmethod
    def access_kernel(mmu):
        return AccessKernel(mmu)

    def __cinit__(self, int levels=4, int bits=9, int nodes=1):
        if not (1 <= levels <= 7) or not (1 <= bits <= 16) or nodes < 1:
            raise ValueError("bad store geometry")
        self.levels = levels
        self.bits = bits
        self.fanout = 1 << bits
        self.nodes = nodes
        self.mask = self.fanout - 1
        self.cap = 0
        self.top = 0
        self.nfree = 0
        self.total = 0
        self.slots = NULL
        self.flg = NULL
        self.lvl = NULL
        self.nod = NULL
        self.spn = NULL
        self.nxt = NULL
        self.occ = NULL
        self.live = NULL
        self.freelist = NULL
        self.node_pages = <long long *> malloc(nodes * sizeof(long long))
        if self.node_pages == NULL:
            raise MemoryError()
        memset(self.node_pages, 0, nodes * sizeof(long long))
        memset(self.hist_local, 0, sizeof(self.hist_local))
        memset(self.hist_remote, 0, sizeof(self.hist_remote))
        self._grow(64)

    def __dealloc__(self):
        free(self.slots)
        free(self.flg)
        free(self.lvl)
        free(self.nod)
        free(self.spn)
        free(self.nxt)
        free(self.occ)
        free(self.live)
        free(self.freelist)
        free(self.node_pages)

    cdef void _grow(self, int cap) except *:
        cdef size_t fan = self.fanout
        cdef void *p
        p = realloc(self.slots, cap * fan * sizeof(long long))
        if p == NULL: raise MemoryError()
        self.slots = <long long *> p
        p = realloc(self.flg, cap * fan * sizeof(unsigned char))
        if p == NULL: raise MemoryError()
        self.flg = <unsigned char *> p
        p = realloc(self.lvl, cap * sizeof(int))
        if p == NULL: raise MemoryError()
        self.lvl = <int *> p
        p = realloc(self.nod, cap * sizeof(int))
        if p == NULL: raise MemoryError()
        self.nod = <int *> p
        p = realloc(self.spn, cap * sizeof(long long))
        if p == NULL: raise MemoryError()
        self.spn = <long long *> p
        p = realloc(self.nxt, cap * sizeof(int))
        if p == NULL: raise MemoryError()
        self.nxt = <int *> p
        p = realloc(self.occ, cap * sizeof(int))
        if p == NULL: raise MemoryError()
        self.occ = <int *> p
        p = realloc(self.live, cap * sizeof(char))
        if p == NULL: raise MemoryError()
        self.live = <char *> p
        p = realloc(self.freelist, cap * sizeof(int))
        if p == NULL: raise MemoryError()
        self.freelist = <int *> p
        memset(self.live + self.cap, 0, (cap - self.cap) * sizeof(char))
        self.cap = cap

    # -- pool ---------------------------------------------------------------

    def alloc(self, int level, int node, long long span):
        return self._alloc(level, node, span)

    cdef int _alloc(self, int level, int node, long long span) except -1:
        cdef int pid
        cdef long long i, base
        if level < 0 or level >= self.levels:
            raise ValueError(f"level {level} out of range")
        if node < 0 or node >= self.nodes:
            raise ValueError(f"node {node} out of range")
        if self.nfree:
            self.nfree -= 1
            pid = self.freelist[self.nfree]
        else:
            if self.top == self.cap:
                self._grow(self.cap * 2)
            pid = self.top
            self.top += 1
        base = <long long> pid * self.fanout
        for i in range(self.fanout):
            self.slots[base + i] = -1
        memset(self.flg + base, 0, self.fanout)
        self.lvl[pid] = level
        self.nod[pid] = node
        self.spn[pid] = span
        self.nxt[pid] = pid
        self.occ[pid] = 0
        self.live[pid] = 1
        self.node_pages[node] += 1
        self.total += 1
        return pid

    def release(self, int pid):
        self._check(pid)
        if self.occ[pid]:
            raise InvariantViolation(f"page {pid} released with {self.occ[pid]} occupied slots")
        if self.nxt[pid] != pid:
            raise InvariantViolation(f"page {pid} released while still linked in a ring")
        self.live[pid] = 0
        self.node_pages[self.nod[pid]] -= 1
        self.total -= 1
        self.freelist[self.nfree] = pid
        self.nfree += 1

    cdef int _check(self, int pid) except -1:
        if pid < 0 or pid >= self.top or not self.live[pid]:
            raise InvariantViolation(f"page {pid} is not live")
        return 0

    cdef inline bint _is_live(self, long long pid):
        return 0 <= pid < self.top and self.live[pid]

    def is_live(self, long long pid):
        return bool(self._is_live(pid))

    def level(self, int pid):
        self._check(pid)
        return self.lvl[pid]

    def node(self, int pid):
        self._check(pid)
        return self.nod[pid]

    def span(self, int pid):
        self._check(pid)
        return self.spn[pid]

    def used(self, int pid):
        self._check(pid)
        return self.occ[pid]

    def ring_next(self, int pid):
        self._check(pid)
        return self.nxt[pid]

    def set_ring_next(self, int pid, int nxt):
        self._check(pid)
        self._check(nxt)
        self.nxt[pid] = nxt

    def total_pages(self):
        return self.total

    def pages_on_node(self, int node):
        return self.node_pages[node]

    def live_pages(self):
        cdef int pid
        return [pid for pid in range(self.top) if self.live[pid]]

    @property
    def walk_local(self):
        cdef int i
        return [self.hist_local[i] for i in range(self.levels)]

    @property
    def walk_remote(self):
        cdef int i
        return [self.hist_remote[i] for i in range(self.levels)]

    # -- slots --------------------------------------------------------------

    def child(self, int pid, int idx):
        return self.slots[<long long> pid * self.fanout + idx]

    def set_child(self, int pid, int idx, long long child):
        cdef long long k = <long long> pid * self.fanout + idx
        cdef long long old = self.slots[k]
        if old < 0 <= child:
            self.occ[pid] += 1
        elif child < 0 <= old:
            self.occ[pid] -= 1
        self.slots[k] = child

    def entry(self, int pid, int idx):
        cdef long long k = <long long> pid * self.fanout + idx
        return self.flg[k], self.slots[k]

    def set_entry(self, int pid, int idx, int flags, long long frame):
        cdef long long k = <long long> pid * self.fanout + idx
        cdef int was = self.flg[k] & PRESENT
        cdef int now = flags & PRESENT
        if now and not was:
            self.occ[pid] += 1
        elif was and not now:
            self.occ[pid] -= 1
        if now:
            self.flg[k] = flags & 0xFF
            self.slots[k] = frame
        else:
            self.flg[k] = 0
            self.slots[k] = -1

    def or_flags(self, int pid, int idx, int bits):
        cdef long long k = <long long> pid * self.fanout + idx
        if self.flg[k] & PRESENT:
            self.flg[k] |= bits

    # -- traversal ----------------------------------------------------------

    def walk(self, int root, long long vpn, int node, bint record=True):
        cdef int pid = root
        cdef int depth = 0
        cdef int remote = 0
        cdef int shift = self.bits * (self.levels - 1)
        cdef long long child
        while True:
            if self.nod[pid] != node:
                remote += 1
                if record:
                    self.hist_remote[depth] += 1
            elif record:
                self.hist_local[depth] += 1
            depth += 1
            if depth == self.levels:
                break
            child = self.slots[<long long> pid * self.fanout + ((vpn >> shift) & self.mask)]
            if child < 0:
                break
            pid = <int> child
            shift -= self.bits
        return pid, depth, remote

    cdef inline long long _probe(self, long long root, long long vpn, int node, int *depth_out,
                                 int *remote_out):
        cdef long long pid = root, child
        cdef int depth = 0, remote = 0
        cdef int shift = self.bits * (self.levels - 1)
        while True:
            if self.nod[pid] != node:
                remote += 1
            depth += 1
            if depth == self.levels:
                break
            child = self.slots[pid * self.fanout + ((vpn >> shift) & self.mask)]
            if child < 0:
                break
            pid = child
            shift -= self.bits
        depth_out[0] = depth
        remote_out[0] = remote
        return pid

    cdef inline long long _leaf(self, long long root, long long vpn):
        cdef long long pid = root
        cdef int shift = self.bits * (self.levels - 1)
        if root < 0:
            return -1
        while shift:
            pid = self.slots[pid * self.fanout + ((vpn >> shift) & self.mask)]
            if pid < 0:
                return -1
            shift -= self.bits
        return pid

    def leaf(self, long long root, long long vpn):
        return self._leaf(root, vpn)

    def mark(self, long long root, long long vpn, int bits):
        cdef long long pid = self._leaf(root, vpn)
        cdef long long k
        if pid < 0:
            return False
        k = pid * self.fanout + (vpn & self.mask)
        if not self.flg[k] & PRESENT:
            return False
        self.flg[k] |= bits
        return True

    # -- bulk leaf operations -----------------------------------------------

    def copy_window(self, int src, int dst, int lo, int hi):
        return self._copy_window(src, dst, lo, hi)

    cdef int _copy_window(self, int src, int dst, int lo, int hi):
        cdef long long sb = <long long> src * self.fanout
        cdef long long db = <long long> dst * self.fanout
        cdef int i, n = 0
        cdef unsigned char f
        for i in range(lo, hi):
            f = self.flg[sb + i]
            if f & PRESENT and not self.flg[db + i] & PRESENT:
                self.flg[db + i] = f
                self.slots[db + i] = self.slots[sb + i]
                n += 1
        self.occ[dst] += n
        return n

    def clear_range(self, int pid, int lo, int hi):
        cdef long long b = <long long> pid * self.fanout
        cdef int i, n = 0
        for i in range(lo, hi):
            if self.flg[b + i] & PRESENT:
                self.flg[b + i] = 0
                self.slots[b + i] = -1
                n += 1
        self.occ[pid] -= n
        return n

    def protect_range(self, int pid, int lo, int hi, int prot):
        cdef long long b = <long long> pid * self.fanout
        cdef int i, n = 0
        cdef unsigned char f
        prot &= PROT_MASK
        for i in range(lo, hi):
            f = self.flg[b + i]
            if f & PRESENT and (f & PROT_MASK) != prot:
                self.flg[b + i] = (f & ~PROT_MASK) | prot
                n += 1
        return n

    def count_present(self, int pid, int lo, int hi):
        cdef long long b = <long long> pid * self.fanout
        cdef int i, n = 0
        for i in range(lo, hi):
            if self.flg[b + i] & PRESENT:
                n += 1
        return n

    def ad_bits(self, int pid, int idx):
        cdef unsigned char f = self.flg[<long long> pid * self.fanout + idx]
        return f & (ACCESSED | DIRTY) if f & PRESENT else 0

    # -- rings ----------------------------------------------------------------

    def ring(self, int pid):
        cdef int cur
        cdef list out
        self._check(pid)
        out = [pid]
        cur = self.nxt[pid]
        while cur != pid:
            if len(out) >= self.nodes:
                raise InvariantViolation(f"ring of page {pid} does not close within {self.nodes} steps")
            out.append(cur)
            cur = self.nxt[cur]
        return out

    cdef int _same_ring(self, int a, int b) except -1:
        cdef int cur = a, k
        for k in range(self.nodes):
            if cur == b:
                return 1
            cur = self.nxt[cur]
            if cur == a:
                return 0
        raise InvariantViolation(f"ring of page {a} does not close")

    def same_ring(self, int a, int b):
        return bool(self._same_ring(a, b))

    cdef int _join(self, int a, int b) except -1:
        cdef int p, q, na
        self._check(a)
        self._check(b)
        if self._same_ring(a, b):
            return 0
        if self.lvl[a] != self.lvl[b] or self.spn[a] != self.spn[b]:
            raise InvariantViolation(f"pages {a} and {b} are not replicas of one logical page")
        p = a
        while True:
            q = b
            while True:
                if self.nod[p] == self.nod[q]:
                    raise InvariantViolation(
                        f"joining pages {a} and {b} would put two replicas on node {self.nod[q]}")
                q = self.nxt[q]
                if q == b:
                    break
            p = self.nxt[p]
            if p == a:
                break
        na = self.nxt[a]
        self.nxt[a] = self.nxt[b]
        self.nxt[b] = na
        return 1

    def join(self, int a, int b):
        return bool(self._join(a, b))

    def unlink(self, int pid):
        cdef int prev = pid
        self._check(pid)
        while self.nxt[prev] != pid:
            prev = self.nxt[prev]
        if prev != pid:
            self.nxt[prev] = self.nxt[pid]
            self.nxt[pid] = pid

    # -- fused fault-path kernels ------------------------------------------------

    cdef inline long long _translate(self, long long root, long long vpn, int node, int *depth_out,
                                     int *remote_out):
        cdef long long pid = root, child
        cdef int depth = 0, remote = 0
        cdef int shift = self.bits * (self.levels - 1)
        while True:
            if self.nod[pid] != node:
                remote += 1
                self.hist_remote[depth] += 1
            else:
                self.hist_local[depth] += 1
            depth += 1
            if depth == self.levels:
                break
            child = self.slots[pid * self.fanout + ((vpn >> shift) & self.mask)]
            if child < 0:
                break
            pid = child
            shift -= self.bits
        depth_out[0] = depth
        remote_out[0] = remote
        if depth < self.levels or not self.flg[pid * self.fanout + (vpn & self.mask)] & PRESENT:
            return -1
        return pid

    def translate(self, long long root, long long vpn, int node):
        cdef int depth, remote
        cdef long long pid = self._translate(root, vpn, node, &depth, &remote)
        return pid, depth, remote

    def touch(self, long long pid, int idx, int bits):
        cdef long long k = pid * self.fanout + idx
        if self.flg[k] & PRESENT:
            self.flg[k] |= bits
        return self.flg[k], self.slots[k]

    cdef inline long long _mark_leaf(self, long long root, long long vpn, int bits):
        cdef long long pid = self._leaf(root, vpn)
        cdef long long k
        if pid < 0:
            return -1
        k = pid * self.fanout + (vpn & self.mask)
        if not self.flg[k] & PRESENT:
            return -1
        self.flg[k] |= bits
        return pid

    def mark_leaf(self, long long root, long long vpn, int bits):
        return self._mark_leaf(root, vpn, bits)

    cdef long long _link_path(self, long long root, long long vpn, int place, long long counterpart,
                              int *allocated, int *links) except -2:
        cdef long long pid = root, other = counterpart, child, k
        cdef int shift = self.bits * (self.levels - 1)
        cdef int level, idx
        allocated[0] = 0
        links[0] = 0
        for level in range(1, self.levels):
            idx = (vpn >> shift) & self.mask
            k = pid * self.fanout + idx
            child = self.slots[k]
            if child < 0:
                child = self._alloc(level, place, (vpn >> shift) << shift)
                self.slots[k] = child
                self.occ[pid] += 1
                allocated[0] += 1
            pid = child
            shift -= self.bits
            if other >= 0:
                other = self.slots[other * self.fanout + idx]
                if other < 0:
                    raise InvariantViolation(f"counterpart path for vpn {vpn:#x} ends early")
                links[0] += self._join(<int> other, <int> pid)
        return pid

    def link_path(self, long long root, long long vpn, int place, long long counterpart):
        cdef int allocated, links
        cdef long long leaf = self._link_path(root, vpn, place, counterpart, &allocated, &links)
        return leaf, allocated, links

    cdef int _install(self, int leaf, int idx, int flags, long long frame, int node, int *remote) except -1:
        cdef int pid = leaf, members = 0
        cdef long long k
        remote[0] = 0
        while True:
            k = <long long> pid * self.fanout + idx
            if not self.flg[k] & PRESENT:
                self.occ[pid] += 1
            self.flg[k] = flags & 0xFF
            self.slots[k] = frame
            members += 1
            if self.nod[pid] != node:
                remote[0] += 1
            pid = self.nxt[pid]
            if pid == leaf:
                break
            if members >= self.nodes:
                raise InvariantViolation(f"ring of page {leaf} does not close within {self.nodes} steps")
        return members

    def install(self, int leaf, int idx, int flags, long long frame, int node):
        cdef int remote
        if not flags & PRESENT:
            raise ValueError("install needs a present PTE")
        cdef int members = self._install(leaf, idx, flags, frame, node, &remote)
        return members, remote

    # -- audits ---------------------------------------------------------------

    def check_tree(self, int root, bint node_local):
        cdef int pid, lvl, i, count, p, bad, depth
        cdef long long c, child_span
        cdef long long pages = 0, present = 0
        cdef unsigned char f
        cdef long long *sl
        cdef unsigned char *fl
        cdef int *stack
        cdef int fan = self.fanout
        self._check(root)
        if self.lvl[root] != 0 or self.spn[root] != 0:
            raise InvariantViolation(f"root {root} has level {self.lvl[root]} span {self.spn[root]}")
        # a tree holds at most every live page once, so top bounds the stack
        stack = <int *> malloc((self.top + 1) * sizeof(int))
        if stack == NULL:
            raise MemoryError()
        try:
            depth = 1
            stack[0] = root
            while depth:
                depth -= 1
                pid = stack[depth]
                pages += 1
                if pages > self.top:
                    raise InvariantViolation(f"tree under root {root} reaches a page twice")
                lvl = self.lvl[pid]
                sl = self.slots + <long long> pid * fan
                fl = self.flg + <long long> pid * fan
                count = 0
                if lvl == self.levels - 1:
                    # branch-free sweep first; the slow loop below only names the culprit
                    bad = 0
                    i = 0
                    while i < fan:
                        if i + 8 <= fan and _block_empty(sl + i, fl + i):
                            i += 8
                            continue
                        f = fl[i]
                        p = f & PRESENT
                        count += p
                        bad |= (p & (sl[i] < 0)) | ((p ^ 1) & ((f != 0) | (sl[i] != -1)))
                        i += 1
                    if bad:
                        for i in range(fan):
                            f = fl[i]
                            if f & PRESENT:
                                if sl[i] < 0:
                                    raise InvariantViolation(f"page {pid} slot {i}: present PTE without frame")
                            elif f or sl[i] != -1:
                                raise InvariantViolation(f"page {pid} slot {i}: stale data in empty PTE")
                    present += count
                else:
                    child_span = (<long long> 1) << (self.bits * (self.levels - 1 - lvl))
                    i = -1
                    while i + 1 < fan:
                        i += 1
                        if not i & 7 and i + 8 <= fan and _slots_empty(sl + i):
                            i += 7
                            continue
                        c = sl[i]
                        if c < 0:
                            continue
                        count += 1
                        if not self._is_live(c):
                            raise InvariantViolation(f"page {pid} slot {i} points at dead page {c}")
                        if self.lvl[c] != lvl + 1:
                            raise InvariantViolation(f"page {c} level {self.lvl[c]} under level {lvl}")
                        if self.spn[c] != self.spn[pid] + i * child_span:
                            raise InvariantViolation(f"page {c} covers the wrong span")
                        if node_local and self.nod[c] != self.nod[pid]:
                            raise InvariantViolation(
                                f"page {c} on node {self.nod[c]} under page on node {self.nod[pid]}")
                        if depth >= self.top:
                            raise InvariantViolation(f"tree under root {root} reaches a page twice")
                        stack[depth] = <int> c
                        depth += 1
                if count != self.occ[pid]:
                    raise InvariantViolation(f"page {pid} occupancy {self.occ[pid]} != actual {count}")
                if lvl and not count:
                    raise InvariantViolation(f"empty non-root page {pid} left allocated")
        finally:
            free(stack)
        return pages, present

    def check_rings(self, int max_len):
        cdef int pid, cur, steps, prev
        for pid in range(self.top):
            if not self.live[pid] or self.nxt[pid] == pid:
                continue
            cur = self.nxt[pid]
            steps = 1
            while cur != pid:
                if steps > max_len:
                    raise InvariantViolation(f"ring of page {pid} does not close within {max_len} steps")
                if not self._is_live(cur):
                    raise InvariantViolation(f"ring of page {pid} reaches dead page {cur}")
                if self.lvl[cur] != self.lvl[pid] or self.spn[cur] != self.spn[pid]:
                    raise InvariantViolation(f"ring of page {pid} mixes logical pages")
                prev = pid
                while prev != cur:
                    if self.nod[prev] == self.nod[cur]:
                        raise InvariantViolation(
                            f"ring of page {pid} has two replicas on node {self.nod[cur]}")
                    prev = self.nxt[prev]
                cur = self.nxt[cur]
                steps += 1

    def audit_range(self, long long rep_root, long long own_root, long long lo, long long hi, int prot):
        return self._audit_range(rep_root, own_root, lo, hi, prot)

    cdef long long _audit_range(self, long long rep_root, long long own_root, long long lo, long long hi,
                                int prot) except -1:
        cdef long long a = lo, b, v, rleaf, oleaf, rb, ob
        cdef long long total = 0
        cdef int i
        cdef unsigned char f, of
        prot &= PROT_MASK
        while a < hi:
            b = (a & ~self.mask) + self.fanout
            if b > hi:
                b = hi
            rleaf = self._leaf(rep_root, a)
            if rleaf >= 0:
                oleaf = self._leaf(own_root, a)
                rb = rleaf * self.fanout
                ob = oleaf * self.fanout
                for v in range(a, b):
                    i = v & self.mask
                    f = self.flg[rb + i]
                    if not f & PRESENT:
                        continue
                    total += 1
                    if (f & PROT_MASK) != prot:
                        raise InvariantViolation(
                            f"vpn {v:#x}: PTE prot {f & PROT_MASK:#x} != VMA prot {prot:#x}")
                    if oleaf < 0 or not self.flg[ob + i] & PRESENT:
                        raise InvariantViolation(f"vpn {v:#x}: replica PTE present but owner lacks it")
                    of = self.flg[ob + i]
                    if self.slots[ob + i] != self.slots[rb + i] or (of & PROT_MASK) != (f & PROT_MASK):
                        raise InvariantViolation(f"vpn {v:#x}: replica PTE disagrees with owner")
            a = b
        return total

    def check_tlb(self, long long root, entries):
        cdef long long vpn, frame, pid, k
        cdef int prot
        cdef unsigned char f
        for key, snap in entries.items():
            vpn = key
            frame = snap[0]
            prot = snap[1]
            dirty = snap[2]
            pid = self._leaf(root, vpn)
            if pid < 0:
                raise InvariantViolation(f"TLB caches vpn {vpn:#x} with no local leaf page")
            k = pid * self.fanout + (vpn & self.mask)
            f = self.flg[k]
            if not f & PRESENT:
                raise InvariantViolation(f"TLB caches vpn {vpn:#x} but local PTE is not present")
            if self.slots[k] != frame:
                raise InvariantViolation(f"TLB caches vpn {vpn:#x} with stale frame")
            if prot & ~f & PROT_MASK:
                raise InvariantViolation(f"TLB caches vpn {vpn:#x} with prot wider than the PTE")
            if not f & ACCESSED or (dirty and not f & DIRTY):
                raise InvariantViolation(f"TLB caches vpn {vpn:#x} but PTE lacks A/D bits")

    def audit_vmas(self, list roots, list vmas, bint ring_check, bint mirror):
        cdef long long total = 0, n, lo, hi, own, a, b, leaf
        cdef int prot, owner_node, node, nroots = len(roots), r
        cdef long long *rt
        cdef int *rn
        rt = <long long *> malloc(max(nroots, 1) * sizeof(long long))
        rn = <int *> malloc(max(nroots, 1) * sizeof(int))
        if rt == NULL or rn == NULL:
            free(rt)
            free(rn)
            raise MemoryError()
        try:
            for r in range(nroots):
                rn[r] = roots[r][0]
                rt[r] = roots[r][1]
            for item in vmas:
                lo, hi, prot, own, owner_node = item
                for r in range(nroots):
                    node = rn[r]
                    n = self._audit_range(rt[r], own, lo, hi, prot)
                    total += n
                    if mirror:
                        self._audit_range(own, rt[r], lo, hi, prot)
                    elif ring_check and n and node != owner_node:
                        a = lo
                        while a < hi:
                            b = (a & ~self.mask) + self.fanout
                            if b > hi:
                                b = hi
                            leaf = self._leaf(rt[r], a)
                            if leaf >= 0 and self._count(leaf, a & self.mask, ((b - 1) & self.mask) + 1):
                                if not self._same_ring(<int> leaf, <int> self._leaf(own, a)):
                                    raise InvariantViolation(
                                        f"node {node} holds PTEs for vpn {a:#x} outside the owner's sharer ring")
                            a = b
        finally:
            free(rt)
            free(rn)
        return total

    cdef int _count(self, long long pid, int lo, int hi):
        cdef long long b = pid * self.fanout
        cdef int i, n = 0
        for i in range(lo, hi):
            if self.flg[b + i] & PRESENT:
                n += 1
        return n


cdef enum:
    MODE_NONE = 0
    MODE_EAGER = 1
    MODE_LAZY = 2


cdef class AccessKernel:
    """Compiled twin of ``Mmu.access`` and the lazy/single-tree fault path.

    Counters, TLBs and frame bookkeeping stay in the owning ``Mmu``'s
    Python objects so both backends produce identical reports; only the
    control flow runs in C. Eager faults and root creation call back into
    the ``Mmu``.
    """

    cdef object mmu
    cdef dict c
    cdef list tlbs
    cdef list frame_node
    cdef PageStore store
    cdef int mode, degree, pshift, levels
    cdef long long mask, fanout
    cdef object capacity
    cdef object local_cost, remote_cost, tlb_hit, fault_overhead

    def __init__(self, mmu):
        self.mmu = mmu
        self.c = mmu.c
        self.tlbs = mmu.tlbs
        self.frame_node = mmu.frame_node
        self.store = mmu.store
        value = mmu.policy.mode.value
        self.mode = MODE_NONE if value == "none" else MODE_EAGER if value == "eager" else MODE_LAZY
        self.degree = mmu.policy.prefetch_degree
        self.pshift = mmu.layout.offset_bits
        self.levels = self.store.levels
        self.fanout = self.store.fanout
        self.mask = self.fanout - 1
        self.capacity = mmu.tlbs[0].capacity if mmu.tlbs else None
        self.local_cost = mmu.local_cost
        self.remote_cost = mmu.remote_cost
        self.tlb_hit = mmu.topo.costs.tlb_hit
        self.fault_overhead = mmu.topo.costs.fault_overhead

    cdef inline long long _root_for(self, space, int node) except -2:
        if self.mode == MODE_NONE:
            return space.single_root
        return space.roots.get(node, -1)

    cdef inline object _mem_cost(self, int a, int b):
        return self.local_cost if a == b else self.remote_cost

    cdef inline void _charge(self, str key, amount) except *:
        cdef dict c = self.c
        c[key] += amount
        c["cost_total"] += amount

    def access(self, space, thread, long long vaddr, bint write):
        cdef long long vpn = vaddr >> self.pshift
        cdef dict c = self.c
        cdef int node = thread.node
        cdef long long root, leaf, k, frame
        cdef int depth, remote, flags
        cdef PageStore store = self.store
        tlb = self.tlbs[thread.core]
        entries = tlb.entries
        snap = entries.get(vpn)
        if snap is not None and (not write or (<int> snap[1]) & PROT_W):
            entries.move_to_end(vpn)
            c["tlb_hits"] += 1
            frame = snap[0]
            cost = self.tlb_hit
            if write and not snap[2]:
                # first store through a clean translation: hardware sets D
                leaf = store._mark_leaf(self._root_for(space, node), vpn, DIRTY)
                if leaf < 0:
                    raise InvariantViolation(f"TLB entry for vpn {vpn:#x} has no backing PTE")
                entries[vpn] = (snap[0], snap[1], True)
                cost = cost + self._mem_cost(node, store.nod[leaf])
            c["cost_tlb"] += cost
            c["cost_total"] += cost
        else:
            c["tlb_misses"] += 1
            vma = space.find(vaddr)
            if vma is None:
                c["faults_segv"] += 1
                raise SegmentationFault(vaddr)
            if not (<int> vma.prot) & (PROT_W if write else PROT_R):
                c["faults_prot"] += 1
                raise ProtectionFault(vaddr)
            root = self._root_for(space, node)
            leaf = -1
            if root >= 0:
                leaf = store._translate(root, vpn, node, &depth, &remote)
                c["walks"] += 1
                cost = (depth - remote) * self.local_cost + remote * self.remote_cost
                c["cost_walk"] += cost
                c["cost_total"] += cost
            if leaf < 0:
                leaf = self._fault(space, thread, vma, vpn, node)
            k = leaf * self.fanout + (vpn & self.mask)
            if store.flg[k] & PRESENT:
                store.flg[k] |= (ACCESSED | DIRTY) if write else ACCESSED
            flags = store.flg[k]
            frame = store.slots[k]
            entries[vpn] = (frame, flags & PROT_MASK, bool(flags & DIRTY))
            entries.move_to_end(vpn)
            if self.capacity is not None and len(entries) > self.capacity:
                entries.popitem(last=False)
                c["tlb_evictions"] += 1
        cost = self.local_cost if self.frame_node[frame] == node else self.remote_cost
        c["cost_data"] += cost
        c["cost_total"] += cost

    cdef long long _ensure_path(self, long long root, long long vpn, int place, int initiator,
                                long long counterpart) except -2:
        cdef int allocated, links
        cdef long long leaf = self.store._link_path(root, vpn, place, counterpart, &allocated, &links)
        if allocated:
            self.mmu._account_pages(place, allocated, initiator)
        if links:
            self.c["ring_links"] += links
        return leaf

    cdef long long _ensure_root(self, space, int node, int initiator) except -2:
        cdef long long pid = self._root_for(space, node)
        if pid >= 0:
            return pid
        return self.mmu.ensure_root(space, node, initiator)

    cdef long long _fault(self, space, thread, vma, long long vpn, int node) except -2:
        cdef dict c = self.c
        cdef PageStore store = self.store
        cdef int idx = vpn & self.mask
        cdef int place, owner, depth, remote, n, lo, hi, size
        cdef long long root, leaf, own_root, opid, t0, v0, v1
        if self.mode == MODE_EAGER:
            return self.mmu._fault(space, thread, vma, vpn)[1]
        self._charge("cost_fault", self.fault_overhead)
        if self.mode == MODE_NONE:
            place = vma.pt_node if vma.pt_node is not None else node
            root = self._ensure_root(space, place, node)
            leaf = self._ensure_path(root, vpn, place, node, -1)
            self._install(vma, leaf, idx, node)
            return leaf

        root = self._ensure_root(space, node, node)
        owner = vma.owner
        if owner == node:
            leaf = self._ensure_path(root, vpn, node, node, -1)
            self._install(vma, leaf, idx, node)
            return leaf

        own_root = self._ensure_root(space, owner, node)
        c["owner_consults"] += 1
        opid = store._probe(own_root, vpn, node, &depth, &remote)
        self._charge("cost_fault", (depth - remote) * self.local_cost + remote * self.remote_cost)
        if depth == self.levels and store.flg[opid * self.fanout + idx] & PRESENT:
            leaf = self._ensure_path(root, vpn, node, node, own_root)
            t0 = vpn - idx
            size = self.fanout
            if self.degree < 0 or (1 << self.degree) > size:
                raise ValueError(f"prefetch degree {self.degree} out of range")
            lo = idx & ~((1 << self.degree) - 1)
            hi = lo + (1 << self.degree)
            v0 = (<long long> vma.start) >> self.pshift
            v1 = (<long long> vma.end) >> self.pshift
            lo = <int> max(lo, v0 - t0, 0)
            hi = <int> min(hi, v1 - t0, size)
            if not lo <= idx < hi:
                raise ValueError(f"index {idx} outside the VMA")
            n = store._copy_window(<int> opid, <int> leaf, lo, hi)
            if n < 1:
                raise InvariantViolation(f"copy from owner installed nothing for vpn {vpn:#x}")
            c["faults_copied"] += 1
            c["pte_copies"] += n
            self._charge("cost_fault", n * self.local_cost)
            return leaf
        opid = self._ensure_path(own_root, vpn, owner, node, -1)
        leaf = self._ensure_path(root, vpn, node, node, own_root)
        self._install(vma, opid, idx, node)
        return leaf

    cdef int _install(self, vma, long long leaf, int idx, int node) except -1:
        cdef dict c = self.c
        cdef int members, remote
        frame = len(self.frame_node)
        self.frame_node.append(vma.data_node if vma.data_node is not None else node)
        self.mmu.live_frames += 1
        c["frames_allocated"] += 1
        c["faults_fresh"] += 1
        members = self.store._install(<int> leaf, idx, PRESENT | ((<int> vma.prot) & PROT_MASK), frame, node, &remote)
        c["fresh_replica_writes"] += members
        self._charge("cost_fault", (members - remote) * self.local_cost + remote * self.remote_cost)
        return 0
