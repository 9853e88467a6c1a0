"""Virtual address layout, VMAs, per-process state and sharer rings.

Page-table pages live in a :class:`~ptsim.store.PageStore` and are named
by integer ids; :class:`PageTablePage` is a read-only view over one of
them for callers that want objects. Replicas of one logical page (same
level, same covered span, different nodes) are chained through
``ring_next`` into a singly linked cycle.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass
from typing import NamedTuple

from .errors import InvariantViolation
from .pteflags import ACCESSED, DIRTY, PRESENT, PROT_MASK, PROT_R, PROT_W, PROT_X

# first address handed out by the mmap cursor (1 GB aligned)
MMAP_BASE = 1 << 32


@dataclass(frozen=True)
class AddressLayout:
    levels: int = 4
    bits_per_level: int = 9
    offset_bits: int = 12

    def __post_init__(self) -> None:
        if self.levels < 1 or self.bits_per_level < 1 or self.offset_bits < 1:
            raise ValueError("layout fields must be positive")
        if self.levels * self.bits_per_level + self.offset_bits > 64:
            raise ValueError("layout exceeds 64 address bits")

    @property
    def fanout(self) -> int:
        return 1 << self.bits_per_level

    @property
    def page_size(self) -> int:
        return 1 << self.offset_bits

    @property
    def va_bits(self) -> int:
        return self.levels * self.bits_per_level + self.offset_bits

    @property
    def max_vaddr(self) -> int:
        return 1 << self.va_bits

    def span_pages(self, level: int) -> int:
        """Number of pages translated by one page-table page at ``level`` (root = 0)."""
        return 1 << (self.bits_per_level * (self.levels - level))


def split_vaddr(layout: AddressLayout, vaddr: int) -> tuple[tuple[int, ...], int]:
    """Per-level table indices (root first) and the in-page offset."""
    if not 0 <= vaddr < layout.max_vaddr:
        raise ValueError(f"address {vaddr:#x} outside the {layout.va_bits}-bit canonical range")
    offset = vaddr & (layout.page_size - 1)
    vpn = vaddr >> layout.offset_bits
    mask = layout.fanout - 1
    bits = layout.bits_per_level
    indices = tuple((vpn >> (bits * (layout.levels - 1 - i))) & mask for i in range(layout.levels))
    return indices, offset


def compose_vaddr(layout: AddressLayout, indices: tuple[int, ...], offset: int = 0) -> int:
    vpn = 0
    for idx in indices:
        vpn = (vpn << layout.bits_per_level) | idx
    return (vpn << layout.offset_bits) | offset


class Prot(enum.IntFlag):
    NONE = 0
    R = PROT_R
    W = PROT_W
    X = PROT_X


def parse_prot(text: str) -> int:
    """``"r"``, ``"rw"``, ``"rwx"``, ``"-"`` ... to protection bits."""
    bits = 0
    for ch in text:
        if ch == "r":
            bits |= PROT_R
        elif ch == "w":
            bits |= PROT_W
        elif ch == "x":
            bits |= PROT_X
        elif ch != "-":
            raise ValueError(f"bad protection string {text!r}")
    return bits


def format_prot(bits: int) -> str:
    text = ("r" if bits & PROT_R else "") + ("w" if bits & PROT_W else "") + ("x" if bits & PROT_X else "")
    return text or "-"


@dataclass(slots=True)
class Vma:
    id: int
    start: int
    length: int
    prot: int
    owner: int
    data_node: int | None = None
    pt_node: int | None = None

    @property
    def end(self) -> int:
        return self.start + self.length

    def contains(self, vaddr: int) -> bool:
        return self.start <= vaddr < self.start + self.length


class Pte(NamedTuple):
    present: bool
    prot: Prot
    frame: int
    accessed: bool
    dirty: bool

    @classmethod
    def from_raw(cls, flags: int, frame: int) -> Pte:
        present = bool(flags & PRESENT)
        return cls(present, Prot(flags & PROT_MASK), frame if present else -1,
                   bool(flags & ACCESSED), bool(flags & DIRTY))


class PageTablePage:
    """Object view of one page-table page held in a store."""

    __slots__ = ("store", "pid")

    def __init__(self, store, pid: int) -> None:
        self.store = store
        self.pid = pid

    def __eq__(self, other: object) -> bool:
        return isinstance(other, PageTablePage) and other.store is self.store and other.pid == self.pid

    def __hash__(self) -> int:
        return hash((id(self.store), self.pid))

    def __repr__(self) -> str:
        return f"PageTablePage(pid={self.pid}, level={self.level}, node={self.node})"

    @property
    def level(self) -> int:
        return self.store.level(self.pid)

    @property
    def node(self) -> int:
        return self.store.node(self.pid)

    @property
    def is_leaf(self) -> bool:
        return self.level == self.store.levels - 1

    @property
    def ring_next(self) -> PageTablePage:
        return PageTablePage(self.store, self.store.ring_next(self.pid))

    @property
    def covering_span(self) -> tuple[int, int]:
        """VPN range ``[start, end)`` translated by this page."""
        start = self.store.span(self.pid)
        return start, start + (1 << (self.store.bits * (self.store.levels - self.level)))

    def entries(self) -> list:
        """Slot contents: child views (interior) or :class:`Pte` values (leaf)."""
        n = self.store.fanout
        if self.is_leaf:
            return [Pte.from_raw(*self.store.entry(self.pid, i)) for i in range(n)]
        out = []
        for i in range(n):
            c = self.store.child(self.pid, i)
            out.append(PageTablePage(self.store, c) if c >= 0 else None)
        return out


@dataclass(slots=True)
class Thread:
    tid: int
    node: int
    core: int


class ProcessSpace:
    """One simulated process: VMAs, per-node page-table roots, threads."""

    def __init__(self, pid: int, layout: AddressLayout | None = None, base: int = MMAP_BASE) -> None:
        self.pid = pid
        self.layout = layout or AddressLayout()
        self.vmas: list[Vma] = []
        self._starts: list[int] = []
        self.roots: dict[int, int] = {}
        # the single tree used when nothing is replicated
        self.single_root = -1
        self.threads: dict[int, Thread] = {}
        self.cursor = base
        self._next_vma_id = 0

    # -- lookup ---------------------------------------------------------------

    def find(self, vaddr: int) -> Vma | None:
        i = bisect.bisect_right(self._starts, vaddr) - 1
        if i >= 0:
            vma = self.vmas[i]
            if vaddr < vma.start + vma.length:
                return vma
        return None

    def vma_by_id(self, vma_id: int) -> Vma | None:
        for vma in self.vmas:
            if vma.id == vma_id:
                return vma
        return None

    def overlapping(self, start: int, end: int) -> list[Vma]:
        i = max(bisect.bisect_right(self._starts, start) - 1, 0)
        out = []
        while i < len(self.vmas) and self.vmas[i].start < end:
            if self.vmas[i].end > start:
                out.append(self.vmas[i])
            i += 1
        return out

    def covers(self, start: int, end: int) -> bool:
        """True when every byte of ``[start, end)`` lies in some VMA."""
        pos = start
        for vma in self.overlapping(start, end):
            if vma.start > pos:
                return False
            pos = max(pos, vma.end)
        return pos >= end

    # -- mutation -------------------------------------------------------------

    def map(self, length: int, prot: int, owner: int, addr: int | None = None,
            data_node: int | None = None, pt_node: int | None = None) -> Vma:
        page = self.layout.page_size
        length = -(-length // page) * page
        if length <= 0:
            raise ValueError("mapping length must be positive")
        if addr is None:
            addr = self.cursor
        elif addr % page:
            raise ValueError(f"fixed address {addr:#x} is not page aligned")
        elif addr < self.cursor:
            raise ValueError(f"fixed address {addr:#x} is below the mmap cursor {self.cursor:#x}")
        if addr + length > self.layout.max_vaddr:
            raise ValueError("virtual address space exhausted")
        vma = Vma(self._next_vma_id, addr, length, prot, owner, data_node, pt_node)
        self._next_vma_id += 1
        self._insert(vma)
        self.cursor = addr + length
        return vma

    def _insert(self, vma: Vma) -> None:
        i = bisect.bisect_left(self._starts, vma.start)
        self.vmas.insert(i, vma)
        self._starts.insert(i, vma.start)

    def remove(self, vma: Vma) -> None:
        i = bisect.bisect_left(self._starts, vma.start)
        if i >= len(self.vmas) or self.vmas[i] is not vma:
            raise KeyError(vma.id)
        del self.vmas[i]
        del self._starts[i]

    def split_at(self, addr: int) -> None:
        """Make ``addr`` a VMA boundary if it falls strictly inside one."""
        vma = self.find(addr)
        if vma is None or vma.start == addr:
            return
        tail = Vma(self._next_vma_id, addr, vma.end - addr, vma.prot, vma.owner, vma.data_node, vma.pt_node)
        self._next_vma_id += 1
        vma.length = addr - vma.start
        self._insert(tail)

    def merge_around(self, start: int, end: int) -> None:
        """Coalesce adjacent compatible VMAs touching ``[start, end]``."""
        i = max(bisect.bisect_right(self._starts, start) - 2, 0)
        while i + 1 < len(self.vmas):
            a, b = self.vmas[i], self.vmas[i + 1]
            if a.start > end:
                break
            if (a.end == b.start and a.prot == b.prot and a.owner == b.owner
                    and a.data_node == b.data_node and a.pt_node == b.pt_node):
                a.length += b.length
                del self.vmas[i + 1]
                del self._starts[i + 1]
            else:
                i += 1


def vma_lookup(space: ProcessSpace, vaddr: int) -> Vma | None:
    return space.find(vaddr)


# -- sharer rings -------------------------------------------------------------

def ring_pids(store, pid: int, limit: int | None = None) -> list[int]:
    """Members of ``pid``'s ring starting at ``pid``."""
    limit = store.nodes if limit is None else limit
    out = [pid]
    cur = store.ring_next(pid)
    while cur != pid:
        if len(out) >= limit:
            raise InvariantViolation(f"ring of page {pid} does not return within {limit} steps")
        out.append(cur)
        cur = store.ring_next(cur)
    return out


def ring_members(page: PageTablePage) -> set[tuple[int, PageTablePage]]:
    store = page.store
    return {(store.node(p), PageTablePage(store, p)) for p in ring_pids(store, page.pid)}


def same_ring(store, a: int, b: int) -> bool:
    cur = a
    for _ in range(store.nodes):
        if cur == b:
            return True
        cur = store.ring_next(cur)
        if cur == a:
            return False
    raise InvariantViolation(f"ring of page {a} does not close")


def ring_join(store, a: int, b: int) -> bool:
    """Merge the rings holding ``a`` and ``b``; False if already one ring.

    Swapping the successors of one member from each of two disjoint cycles
    splices them into a single cycle.
    """
    if same_ring(store, a, b):
        return False
    if store.level(a) != store.level(b) or store.span(a) != store.span(b):
        raise InvariantViolation(f"pages {a} and {b} are not replicas of one logical page")
    nodes_a = {store.node(p) for p in ring_pids(store, a)}
    if any(store.node(p) in nodes_a for p in ring_pids(store, b)):
        raise InvariantViolation(f"joining pages {a} and {b} would put two replicas on one node")
    na, nb = store.ring_next(a), store.ring_next(b)
    store.set_ring_next(a, nb)
    store.set_ring_next(b, na)
    return True


def ring_link(existing: PageTablePage, fresh: PageTablePage) -> None:
    """Add a not-yet-linked replica to ``existing``'s ring."""
    store = existing.store
    if store.ring_next(fresh.pid) != fresh.pid:
        raise InvariantViolation(f"page {fresh.pid} is already linked into a ring")
    ring_join(store, existing.pid, fresh.pid)


def ring_unlink(store, pid: int) -> None:
    prev = pid
    while store.ring_next(prev) != pid:
        prev = store.ring_next(prev)
    if prev != pid:
        store.set_ring_next(prev, store.ring_next(pid))
        store.set_ring_next(pid, pid)
