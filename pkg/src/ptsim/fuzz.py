"""Random trace generator for protocol fuzzing.

Traces mix thread churn, small mmaps, partial munmaps and mprotects, and
reads/writes. Most operations target live mappings; a small fraction hit
holes on purpose so the error paths get exercised too.
"""

from __future__ import annotations

import random

from .syscalls import TraceEvent
from .topology import MachineTopology
from .vmem import MMAP_BASE

PAGE = 4096
LEAF = 512


def random_trace(seed: int, n_events: int = 10_000, topo: MachineTopology | None = None,
                 max_vma_pages: int = 48, max_regions: int = 8, bad_rate: float = 0.02) -> list[TraceEvent]:
    rng = random.Random(seed)
    nodes = topo.node_count if topo else 4
    cores = topo.cores_per_node if topo else 2
    events: list[TraceEvent] = []
    threads: dict[int, int] = {}
    load = [0] * nodes
    regions: list[list[int]] = []  # [start_vpn, end_vpn) still mapped, per generator bookkeeping
    cursor = MMAP_BASE // PAGE
    next_tid = 0

    def emit(tid: int, op: str, **kw) -> None:
        events.append(TraceEvent(len(events) + 1, 0, tid, op, **kw))

    def free_node() -> int | None:
        free = [n for n in range(nodes) if load[n] < cores]
        return rng.choice(free) if free else None

    def spawn() -> None:
        nonlocal next_tid
        node = free_node()
        if node is None:
            return
        threads[next_tid] = node
        load[node] += 1
        emit(next_tid, "spawn", node=node)
        next_tid += 1

    for _ in range(rng.randint(3, nodes * cores - 1)):
        spawn()

    def pick_range() -> tuple[int, int]:
        r = rng.choice(regions)
        a = rng.randrange(r[0], r[1])
        b = rng.randint(a + 1, min(r[1], a + max_vma_pages))
        return a, b

    while len(events) < n_events:
        tid = rng.choice(list(threads))
        roll = rng.random()
        if roll < 0.03:
            if len(threads) < nodes * cores and rng.random() < 0.6:
                spawn()
            elif len(threads) > 1:
                node = threads.pop(tid)
                load[node] -= 1
                emit(tid, "exit")
        elif roll < 0.06:
            node = free_node()
            if node is not None:
                load[threads[tid]] -= 1
                load[node] += 1
                threads[tid] = node
                emit(tid, "migrate", node=node)
        elif roll < 0.14 and len(regions) < max_regions:
            pages = rng.randint(1, max_vma_pages)
            if rng.random() < 0.3:
                cursor = -(-cursor // LEAF) * LEAF - rng.randint(0, 8)
            cursor += rng.choice((0, 0, 1, 3))
            prot = rng.choice(("rw", "rw", "rw", "r", "rwx"))
            kw = {}
            if rng.random() < 0.1:
                kw["node"] = rng.randrange(nodes)
            emit(tid, "mmap", length=pages * PAGE, prot=prot, addr=cursor * PAGE, **kw)
            regions.append([cursor, cursor + pages])
            cursor += pages
        elif roll < 0.20 and regions:
            if rng.random() < bad_rate * 5:
                a = cursor + 1
                b = a + 1
            else:
                a, b = pick_range()
            emit(tid, "munmap", addr=a * PAGE, length=(b - a) * PAGE)
            survivors = []
            for r in regions:
                if b <= r[0] or a >= r[1]:
                    survivors.append(r)
                    continue
                if r[0] < a:
                    survivors.append([r[0], a])
                if b < r[1]:
                    survivors.append([b, r[1]])
            regions[:] = survivors
        elif roll < 0.28 and regions:
            a, b = pick_range()
            emit(tid, "mprotect", addr=a * PAGE, length=(b - a) * PAGE,
                 prot=rng.choice(("r", "rw", "rw", "rwx", "-")))
        elif roll < 0.29:
            emit(tid, "spin", iters=rng.randint(1, 100))
        else:
            if regions and rng.random() > bad_rate:
                r = rng.choice(regions)
                vpn = rng.randrange(r[0], r[1])
            else:
                vpn = cursor + rng.randint(1, 1000)
            emit(tid, "access", addr=vpn * PAGE + rng.randrange(PAGE), kind=rng.choice(("r", "r", "w")))
    return events[:n_events]
