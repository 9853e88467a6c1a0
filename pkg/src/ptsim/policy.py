"""Replication policies and the two pure decisions they drive.

``prefetch_window`` picks which leaf entries a lazy fault copies from the
owner; ``coherence_targets`` / ``shootdown_targets`` decide how far a
page-table change must fan out.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

from .errors import ConfigError
from .vmem import PageTablePage, ProcessSpace, ring_pids


class Mode(enum.Enum):
    NONE = "none"
    EAGER = "eager"
    LAZY = "lazy"


@dataclass(frozen=True)
class ReplicationPolicy:
    mode: Mode = Mode.LAZY
    prefetch_degree: int = 0
    tlb_filter: bool = False

    def __post_init__(self) -> None:
        if not isinstance(self.mode, Mode):
            raise ConfigError(f"unknown policy mode {self.mode!r}")
        if not 0 <= self.prefetch_degree <= 16:
            raise ConfigError(f"prefetch degree {self.prefetch_degree} out of range")

    @property
    def lazy(self) -> bool:
        return self.mode is Mode.LAZY

    @property
    def filtering(self) -> bool:
        """Shootdowns are scoped to sharer nodes (lazy only)."""
        return self.mode is Mode.LAZY and self.tlb_filter

    @property
    def degree(self) -> int:
        return self.prefetch_degree if self.mode is Mode.LAZY else 0

    def label(self) -> str:
        if self.mode is not Mode.LAZY:
            return self.mode.value
        text = "lazy"
        if self.prefetch_degree:
            text += f"@{self.prefetch_degree}"
        return text + ("+opt" if self.tlb_filter else "")

    @classmethod
    def parse(cls, token: str) -> ReplicationPolicy:
        """``none``, ``eager``, ``lazy``, ``lazy+opt``, ``lazy@9``, ``lazy@9+opt``."""
        text = token.strip().lower()
        tlb = text.endswith("+opt")
        if tlb:
            text = text[:-4]
        degree = 0
        if "@" in text:
            text, _, d = text.partition("@")
            try:
                degree = int(d)
            except ValueError:
                raise ConfigError(f"bad prefetch degree in policy {token!r}") from None
        try:
            mode = Mode(text)
        except ValueError:
            raise ConfigError(f"unknown policy {token!r}") from None
        if mode is not Mode.LAZY and (tlb or degree):
            raise ConfigError(f"policy {token!r}: prefetch and tlb-opt apply to lazy only")
        return cls(mode, degree, tlb)


def prefetch_window(pte_index: int, d: int, table_span: tuple[int, int],
                    vma_span: tuple[int, int]) -> range:
    """Leaf indices to copy for a fault on ``pte_index``.

    ``table_span`` and ``vma_span`` are half-open VPN ranges of the leaf
    page and the VMA. The result is the 2^d-aligned block holding the
    index, clipped to both.
    """
    t0, t1 = table_span
    size = t1 - t0
    if not 0 <= pte_index < size:
        raise ValueError(f"index {pte_index} outside the leaf page")
    if d < 0 or (1 << d) > size:
        raise ValueError(f"prefetch degree {d} out of range")
    lo = pte_index & ~((1 << d) - 1)
    hi = lo + (1 << d)
    lo = max(lo, vma_span[0] - t0, 0)
    hi = min(hi, vma_span[1] - t0, size)
    if not lo <= pte_index < hi:
        raise ValueError(f"index {pte_index} outside the VMA")
    return range(lo, hi)


def coherence_targets(page: PageTablePage, policy: ReplicationPolicy, topo=None) -> set[int]:
    """Nodes whose replica of ``page`` must see an update."""
    if policy.mode is Mode.NONE:
        return {page.node}
    store = page.store
    return {store.node(p) for p in ring_pids(store, page.pid)}


def sharer_nodes(store, leaves: Iterable[int]) -> set[int]:
    nodes: set[int] = set()
    for pid in leaves:
        for p in ring_pids(store, pid):
            nodes.add(store.node(p))
    return nodes


def target_cores(space: ProcessSpace, sharers: set[int] | None, policy: ReplicationPolicy,
                 initiator_core: int | None = None) -> set[int]:
    """Process-thread cores to interrupt given the sharer nodes of the changed leaves."""
    if policy.filtering and sharers is not None:
        cores = {t.core for t in space.threads.values() if t.node in sharers}
    else:
        cores = {t.core for t in space.threads.values()}
    cores.discard(initiator_core)
    return cores


def shootdown_targets(space: ProcessSpace, pages, policy: ReplicationPolicy,
                      initiator_core: int | None = None) -> set[int]:
    """Cores to interrupt after changing PTEs held by ``pages``.

    ``pages`` is one :class:`PageTablePage` or an iterable of them. The
    initiator is excluded; it flushes its own TLB without an IPI.
    """
    if isinstance(pages, PageTablePage):
        pages = [pages]
    pages = list(pages)
    sharers = sharer_nodes(pages[0].store, [p.pid for p in pages]) if pages else set()
    return target_cores(space, sharers, policy, initiator_core)
