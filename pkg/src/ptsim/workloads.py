"""Scenario generators and the line-delimited JSON trace format.

Every generator is a pure function of ``(ScenarioSpec, topology)``: the
same spec and seed always yield the same event list. Generators place
each mmap at an explicit address so traces replay identically whatever
the simulator's own allocator would choose.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, TextIO

from .errors import ConfigError, TraceError
from .syscalls import OPS, TraceEvent, paused_gc
from .topology import MachineTopology
from .vmem import MMAP_BASE

PAGE = 4096
MB = 1 << 20
LEAF_SPAN = 512 * PAGE  # bytes translated by one leaf page-table page

# JSON key <-> TraceEvent attribute
_WIRE = {"len": "length"}
_ATTR = {v: k for k, v in _WIRE.items()}
_OPTIONAL = ("node", "length", "prot", "addr", "vma", "kind", "iters", "data_node", "pt_node")


class GenerationError(ConfigError):
    """A scenario cannot be laid out on the requested machine."""


@dataclass
class ScenarioSpec:
    name: str
    params: dict = field(default_factory=dict)
    seed: int = 0


class _Trace:
    """Event builder with a running seq counter and an address cursor."""

    def __init__(self) -> None:
        self.events: list[TraceEvent] = []
        self.cursor = MMAP_BASE

    def add(self, proc: int, thread: int, op: str, **kw) -> TraceEvent:
        ev = TraceEvent(len(self.events) + 1, proc, thread, op, **kw)
        self.events.append(ev)
        return ev

    def accesses(self, proc: int, thread: int, addrs, kind: str) -> None:
        """Append one access event per address (the hot path of big traversals)."""
        seq = len(self.events) + 1
        self.events.extend(TraceEvent(seq + i, proc, thread, "access", None, None, None, a, None, kind)
                           for i, a in enumerate(addrs))

    def mmap(self, proc: int, thread: int, length: int, prot: str = "rw", align: int = PAGE, **kw) -> int:
        length = -(-length // PAGE) * PAGE
        addr = -(-self.cursor // align) * align
        self.add(proc, thread, "mmap", length=length, prot=prot, addr=addr, **kw)
        self.cursor = addr + length
        return addr


def gamma_alloc_size(rng: random.Random, shape: float = 2.0, mean: float = 3.3 * MB) -> int:
    """Allocation size drawn from Gamma(shape, mean/shape), rounded up to whole pages."""
    draw = rng.gammavariate(shape, mean / shape)
    return max(1, math.ceil(draw / PAGE)) * PAGE


def _spread(topo: MachineTopology, nodes: int, per_node: int) -> list[int]:
    if nodes > topo.node_count:
        raise GenerationError(f"scenario wants {nodes} nodes, machine has {topo.node_count}")
    if per_node > topo.cores_per_node:
        raise GenerationError(f"scenario wants {per_node} threads per node, nodes have {topo.cores_per_node} cores")
    return [n for n in range(nodes) for _ in range(per_node)]


# -- scenarios ----------------------------------------------------------------


def _loop_setup(t: _Trace, topo: MachineTopology, p: dict) -> None:
    sockets = p["sockets"] or topo.node_count
    k = p["spinners_per_socket"]
    _spread(topo, sockets, k)
    if k + 1 > topo.cores_per_node:
        raise GenerationError(f"{k} spinners plus the worker exceed {topo.cores_per_node} cores per node")
    t.add(0, 0, "spawn", node=0)
    tid = 1
    for node in range(sockets):
        for _ in range(k):
            t.add(0, tid, "spawn", node=node)
            tid += 1
    for spinner in range(1, tid):
        t.add(0, spinner, "spin", iters=p["spin_iters"])


def gen_mprotect_loop(t: _Trace, topo, p, rng) -> None:
    _loop_setup(t, topo, p)
    addr = t.mmap(0, 0, PAGE, "rw")
    t.add(0, 0, "access", addr=addr, kind="w")
    for i in range(p["iters"]):
        t.add(0, 0, "mprotect", addr=addr, length=PAGE, prot="r" if i % 2 == 0 else "rw")


def gen_munmap_loop(t: _Trace, topo, p, rng) -> None:
    _loop_setup(t, topo, p)
    for _ in range(p["iters"]):
        addr = t.mmap(0, 0, PAGE, "rw")
        t.add(0, 0, "access", addr=addr, kind="w")
        t.add(0, 0, "munmap", addr=addr, length=PAGE)


def gen_touch_once_traversal(t: _Trace, topo, p, rng) -> None:
    if topo.node_count < 2 and p["access_node"] != p["init_node"]:
        raise GenerationError("traversal from a non-owner node needs two nodes")
    for n in (p["init_node"], p["access_node"]):
        if not 0 <= n < topo.node_count:
            raise GenerationError(f"node {n} not on this machine")
    pages = p["size"] // PAGE
    t.add(0, 0, "spawn", node=p["init_node"])
    t.add(0, 1, "spawn", node=p["access_node"])
    base = t.mmap(0, 0, pages * PAGE, "rw", align=LEAF_SPAN)
    if p["init"]:
        t.accesses(0, 0, range(base, base + pages * PAGE, PAGE), "w")
    order = list(range(base, base + pages * PAGE, PAGE))
    for _ in range(p["passes"]):
        rng.shuffle(order)
        t.accesses(0, 1, order, "r")


def _malloc_threads(t: _Trace, topo, p) -> list[int]:
    nodes = p["nodes"] or topo.node_count
    placement = _spread(topo, nodes, p["threads_per_node"])
    for tid, node in enumerate(placement):
        t.add(0, tid, "spawn", node=node)
    return list(range(len(placement)))


def _touch(t: _Trace, tid: int, addr: int, length: int, touch: int) -> None:
    pages = length // PAGE
    n = pages if touch <= 0 else min(touch, pages)
    for i in range(n):
        t.add(0, tid, "access", addr=addr + i * PAGE, kind="w")


def gen_malloc_stateless(t: _Trace, topo, p, rng) -> None:
    threads = _malloc_threads(t, topo, p)
    for _ in range(p["iters"]):
        for tid in threads:
            size = gamma_alloc_size(rng, p["gamma_shape"], p["mean"])
            addr = t.mmap(0, tid, size, "rw")
            _touch(t, tid, addr, size, p["touch"])
            t.add(0, tid, "munmap", addr=addr, length=size)


def gen_malloc_stateful(t: _Trace, topo, p, rng) -> None:
    threads = _malloc_threads(t, topo, p)
    live: dict[int, list[tuple[int, int]]] = {tid: [] for tid in threads}

    def alloc(tid: int) -> None:
        size = gamma_alloc_size(rng, p["gamma_shape"], p["mean"])
        addr = t.mmap(0, tid, size, "rw")
        _touch(t, tid, addr, size, p["touch"])
        live[tid].append((addr, size))

    for _ in range(p["live"]):
        for tid in threads:
            alloc(tid)
    for _ in range(p["iters"]):
        for tid in threads:
            addr, size = live[tid].pop(0)
            t.add(0, tid, "munmap", addr=addr, length=size)
            alloc(tid)


def gen_webserver_churn(t: _Trace, topo, p, rng) -> None:
    threads = _malloc_threads(t, topo, p)
    lo, hi = p["min_size"], p["max_size"]
    if not 0 < lo <= hi:
        raise GenerationError("webserver sizes need 0 < min_size <= max_size")
    for _ in range(p["iters"]):
        for tid in threads:
            size = -(-rng.randint(lo, hi) // PAGE) * PAGE
            addr = t.mmap(0, tid, size, "rw")
            _touch(t, tid, addr, size, p["touch"])
            t.add(0, tid, "munmap", addr=addr, length=size)


def gen_kv_churn(t: _Trace, topo, p, rng) -> None:
    threads = _malloc_threads(t, topo, p)
    slice_pages = p["slice_pages"]
    if not 0 < slice_pages <= 512:
        raise GenerationError("slice_pages must be in [1, 512]")
    # one guarded store; each thread's keys live in its own leaf-aligned slice
    base = t.mmap(0, 0, len(threads) * LEAF_SPAN, "r", align=LEAF_SPAN)
    cadence = p["protect"]
    for _ in range(p["iters"]):
        for tid in threads:
            addr = base + tid * LEAF_SPAN + rng.randrange(slice_pages) * PAGE
            if rng.random() < p["set_ratio"]:
                if cadence:
                    t.add(0, tid, "mprotect", addr=addr, length=PAGE, prot="rw")
                    t.add(0, tid, "access", addr=addr, kind="w")
                    t.add(0, tid, "mprotect", addr=addr, length=PAGE, prot="r")
                else:
                    t.add(0, tid, "access", addr=addr, kind="r")
            else:
                t.add(0, tid, "access", addr=addr, kind="r")


def gen_partitioned(t: _Trace, topo, p, rng) -> None:
    nodes = p["nodes"] or topo.node_count
    _spread(topo, nodes, 1)
    pages = p["pages_per_node"]
    bases = []
    for tid in range(nodes):
        t.add(0, tid, "spawn", node=tid)
    for tid in range(nodes):
        bases.append(t.mmap(0, tid, pages * PAGE, "rw"))
    for _ in range(p["passes"]):
        for i in range(pages):
            for tid in range(nodes):
                t.add(0, tid, "access", addr=bases[tid] + i * PAGE, kind="w")


def gen_migration(t: _Trace, topo, p, rng) -> None:
    src, dst = p["from_node"], p["to_node"]
    for n in (src, dst):
        if not 0 <= n < topo.node_count:
            raise GenerationError(f"node {n} not on this machine")
    pages = p["size"] // PAGE
    t.add(0, 0, "spawn", node=src)
    base = t.mmap(0, 0, pages * PAGE, "rw", align=LEAF_SPAN)
    order = list(range(pages))
    for v in order:
        t.add(0, 0, "access", addr=base + v * PAGE, kind="w")
    for _ in range(p["passes_before"]):
        rng.shuffle(order)
        for v in order:
            t.add(0, 0, "access", addr=base + v * PAGE, kind="r")
    t.add(0, 0, "migrate", node=dst)
    for _ in range(p["passes_after"]):
        rng.shuffle(order)
        for v in order:
            t.add(0, 0, "access", addr=base + v * PAGE, kind="r")


_LOOP = {"sockets": 0, "spinners_per_socket": 0, "iters": 1000, "spin_iters": 1}
_MALLOC = {"nodes": 0, "threads_per_node": 1, "iters": 100, "touch": 4,
           "gamma_shape": 2.0, "mean": 3.3 * MB}

SCENARIOS: dict[str, tuple[Callable, dict]] = {
    "mprotect_loop": (gen_mprotect_loop, dict(_LOOP)),
    "munmap_loop": (gen_munmap_loop, dict(_LOOP)),
    "touch_once_traversal": (gen_touch_once_traversal,
                             {"size": 1 << 30, "init_node": 0, "access_node": 1, "passes": 1, "init": 1}),
    "malloc_stateless": (gen_malloc_stateless, dict(_MALLOC)),
    "malloc_stateful": (gen_malloc_stateful, dict(_MALLOC, live=256, iters=256)),
    "webserver_churn": (gen_webserver_churn,
                        {"nodes": 0, "threads_per_node": 2, "iters": 100, "min_size": 16 * 1024,
                         "max_size": 256 * 1024, "touch": 0}),
    "kv_churn": (gen_kv_churn,
                 {"nodes": 0, "threads_per_node": 2, "iters": 500, "set_ratio": 0.1,
                  "slice_pages": 512, "protect": 1}),
    "partitioned": (gen_partitioned, {"nodes": 0, "pages_per_node": 1000, "passes": 1}),
    "migration": (gen_migration,
                  {"size": 64 * MB, "from_node": 0, "to_node": 1, "passes_before": 1, "passes_after": 2}),
}


def scenario_params(name: str, params: dict | None = None) -> dict:
    """Defaults for ``name`` overlaid with ``params``; unknown names rejected."""
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    merged = dict(SCENARIOS[name][1])
    for key, value in (params or {}).items():
        if key not in merged:
            raise ConfigError(f"scenario {name} has no parameter {key!r}")
        default = merged[key]
        try:
            merged[key] = type(default)(value) if not isinstance(value, type(default)) else value
        except (TypeError, ValueError):
            raise ConfigError(f"parameter {key}={value!r} is not a {type(default).__name__}") from None
    return merged


def gen_scenario(spec: ScenarioSpec, topo: MachineTopology) -> list[TraceEvent]:
    gen = SCENARIOS[spec.name][0] if spec.name in SCENARIOS else None
    params = scenario_params(spec.name, spec.params)
    t = _Trace()
    with paused_gc():
        gen(t, topo, params, random.Random(spec.seed))
    return t.events


# -- trace wire format --------------------------------------------------------------


def event_to_dict(ev: TraceEvent) -> dict:
    out = {"seq": ev.seq, "proc": ev.proc, "thread": ev.thread, "op": ev.op}
    for attr in _OPTIONAL:
        value = getattr(ev, attr)
        if value is not None:
            out[_ATTR.get(attr, attr)] = value
    return out


def serialize_trace(events: Iterable[TraceEvent], out: TextIO | None = None) -> str | None:
    """JSONL text for ``events``; written to ``out`` when given."""
    lines = (json.dumps(event_to_dict(ev), separators=(",", ":")) + "\n" for ev in events)
    if out is None:
        return "".join(lines)
    for line in lines:
        out.write(line)
    return None


_REQUIRED = {
    "spawn": ("node",), "migrate": ("node",), "exit": (), "spin": (),
    "mmap": ("len",), "munmap": (), "mprotect": ("addr", "len", "prot"),
    "access": ("addr", "kind"),
}
_INT_KEYS = ("seq", "proc", "thread", "node", "len", "addr", "vma", "iters", "data_node", "pt_node")
_KNOWN = set(_INT_KEYS) | {"op", "prot", "kind"}


def _column(line: str, key: str) -> int:
    pos = line.find(f'"{key}"')
    return pos + 1 if pos >= 0 else 1


def _parse_line(line: str, lineno: int) -> TraceEvent:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceError(exc.msg, lineno, exc.colno) from None
    if not isinstance(rec, dict):
        raise TraceError("record is not a JSON object", lineno, 1)
    for key in rec:
        if key not in _KNOWN:
            raise TraceError(f"unknown field {key!r}", lineno, _column(line, key))
    for key in ("seq", "proc", "thread", "op"):
        if key not in rec:
            raise TraceError(f"missing field {key!r}", lineno, 1)
    for key in _INT_KEYS:
        if key in rec and (not isinstance(rec[key], int) or isinstance(rec[key], bool) or rec[key] < 0):
            raise TraceError(f"field {key!r} must be a non-negative integer", lineno, _column(line, key))
    op = rec["op"]
    if op not in OPS:
        raise TraceError(f"unknown op {op!r}", lineno, _column(line, "op"))
    for key in _REQUIRED[op]:
        if key not in rec:
            raise TraceError(f"{op} needs field {key!r}", lineno, 1)
    if op == "munmap" and "vma" not in rec and not ("addr" in rec and "len" in rec):
        raise TraceError("munmap needs vma or addr+len", lineno, 1)
    if "len" in rec and rec["len"] == 0:
        raise TraceError("len must be positive", lineno, _column(line, "len"))
    if "prot" in rec:
        prot = rec["prot"]
        if not isinstance(prot, str) or not prot or any(ch not in "rwx-" for ch in prot):
            raise TraceError(f"bad prot {prot!r}", lineno, _column(line, "prot"))
    if "kind" in rec and rec["kind"] not in ("r", "w"):
        raise TraceError(f"kind must be 'r' or 'w', got {rec['kind']!r}", lineno, _column(line, "kind"))
    kw = {_WIRE.get(k, k): v for k, v in rec.items() if k not in ("seq", "proc", "thread", "op")}
    return TraceEvent(rec["seq"], rec["proc"], rec["thread"], op, **kw)


def iter_trace(stream: Iterable[str]) -> Iterator[TraceEvent]:
    last = None
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        ev = _parse_line(line, lineno)
        if last is not None and ev.seq <= last:
            raise TraceError(f"seq {ev.seq} does not increase (previous {last})", lineno, _column(line, "seq"))
        last = ev.seq
        yield ev


def parse_trace(stream: Iterable[str] | str) -> list[TraceEvent]:
    """Validated events from JSONL text or an iterable of lines."""
    if isinstance(stream, str):
        stream = stream.splitlines()
    return list(iter_trace(stream))
