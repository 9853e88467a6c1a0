"""Counter registry, run reports and CSV output.

A :class:`MetricsReport` is a flat mapping of counter name to number.
Counters only grow; the ``pt_pages*`` entries are gauges (current
page-table footprint) plus a high-water mark, and the ``sharers_*``
gauges describe ring sizes at the end of a run.
"""

from __future__ import annotations

import csv
import io
import math
from typing import Iterable, Sequence

PAGE_BYTES = 4096

OPS = ("spawn", "exit", "migrate", "mmap", "munmap", "mprotect", "access", "spin")
COST_CATEGORIES = ("tlb", "walk", "fault", "pt_alloc", "coherence", "ipi", "data", "syscall")

_BASE = (
    "events", "trace_errors",
    "tlb_hits", "tlb_misses", "tlb_invalidations", "tlb_evictions", "tlb_flushes",
    "walks",
    "faults_local_hit", "faults_copied", "faults_fresh", "faults_segv", "faults_prot",
    "owner_consults", "pte_copies", "fresh_replica_writes",
    "replica_updates_local", "replica_updates_remote",
    "shootdowns", "ipis_local", "ipis_remote",
    "pt_allocs", "pt_frees", "ring_links",
    "frames_allocated", "frames_freed",
    "cost_total",
)

META_COLUMNS = ("run_id", "policy", "prefetch", "tlb_opt")


def counter_names(nodes: int, levels: int) -> list[str]:
    names = list(_BASE)
    names += [f"cost_{c}" for c in COST_CATEGORIES]
    names += [f"calls_{op}" for op in OPS] + [f"opcost_{op}" for op in OPS]
    for i in range(levels):
        names += [f"walk_l{i}_local", f"walk_l{i}_remote"]
    return names


def gauge_names(nodes: int) -> list[str]:
    return (["pt_pages_total", "pt_pages_peak"] + [f"pt_pages_node{n}" for n in range(nodes)]
            + list(SHARER_GAUGES))


# ring sizes of live page-table pages, refreshed when a run finishes
SHARER_GAUGES = ("sharers_root_max", "sharers_nonroot_min", "sharers_nonroot_max")


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if value.is_integer() and abs(value) < 1e15:
            return str(int(value))
        return repr(value)
    return str(value)


class MetricsReport:
    """Counters and gauges for one simulation run."""

    def __init__(self, nodes: int, levels: int = 4, meta: dict | None = None) -> None:
        self.nodes = nodes
        self.levels = levels
        self.counters: dict[str, float] = dict.fromkeys(counter_names(nodes, levels), 0)
        self.gauges: dict[str, int] = dict.fromkeys(gauge_names(nodes), 0)
        self.meta = {"run_id": "", "policy": "", "prefetch": 0, "tlb_opt": "off"}
        if meta:
            self.meta.update(meta)

    def record(self, name: str, amount: float = 1, node: int | None = None) -> None:
        """Accumulate ``amount`` into ``name``.

        ``pt_pages`` with a node adjusts that node's footprint gauge
        (negative amounts when pages are freed).
        """
        if name == "pt_pages":
            if node is None or not 0 <= node < self.nodes:
                raise KeyError(f"pt_pages needs a node in [0, {self.nodes})")
            g = self.gauges
            g[f"pt_pages_node{node}"] += amount
            g["pt_pages_total"] += amount
            if g["pt_pages_total"] > g["pt_pages_peak"]:
                g["pt_pages_peak"] = g["pt_pages_total"]
            return
        if name not in self.counters:
            raise KeyError(f"unknown counter {name!r}")
        if amount < 0:
            raise ValueError(f"counter {name} cannot decrease")
        self.counters[name] += amount

    def page_count(self, node: int) -> int:
        return self.gauges[f"pt_pages_node{node}"]

    def footprint_bytes(self, node: int | None = None) -> int:
        if node is None:
            return self.gauges["pt_pages_total"] * PAGE_BYTES
        return self.page_count(node) * PAGE_BYTES

    def values(self) -> dict[str, float]:
        out = dict(self.counters)
        out.update(self.gauges)
        return out

    def __getitem__(self, name: str) -> float:
        if name in self.counters:
            return self.counters[name]
        return self.gauges[name]

    def __eq__(self, other: object) -> bool:
        return (isinstance(other, MetricsReport) and self.meta == other.meta
                and self.values() == other.values())


def report_columns(report: MetricsReport) -> list[str]:
    return list(META_COLUMNS) + sorted(report.values())


def report_csv(reports: MetricsReport | Sequence[MetricsReport],
               extra: Sequence[dict] | None = None) -> str:
    """CSV text: header plus one row per report.

    ``extra`` optionally supplies additional per-row columns (appended in
    their given order after the counters).
    """
    if isinstance(reports, MetricsReport):
        reports = [reports]
    reports = list(reports)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if not reports:
        writer.writerow(META_COLUMNS)
        return buf.getvalue()
    cols = report_columns(reports[0])
    extra_cols = list(extra[0]) if extra else []
    writer.writerow(cols + extra_cols)
    for i, rep in enumerate(reports):
        vals = rep.values()
        row = [_fmt(rep.meta[c]) for c in META_COLUMNS]
        row += [_fmt(vals.get(c, 0)) for c in cols[len(META_COLUMNS):]]
        if extra:
            row += [_fmt(extra[i][c]) for c in extra_cols]
        writer.writerow(row)
    return buf.getvalue()


def ratio(value: float, base: float) -> float:
    if base:
        return value / base
    return 1.0 if value == 0 else math.inf


def normalized_columns(reports: Sequence[MetricsReport], baseline: int) -> list[dict]:
    """Per-report ``norm_<name>`` columns, each value divided by the baseline's."""
    base = reports[baseline].values()
    names = sorted(base)
    out = []
    for rep in reports:
        vals = rep.values()
        out.append({f"norm_{n}": ratio(vals[n], base[n]) for n in names})
    return out


def sum_deltas(summaries: Iterable[dict]) -> dict[str, float]:
    """Add up the ``delta`` maps of per-event summaries."""
    total: dict[str, float] = {}
    for s in summaries:
        for k, v in s["delta"].items():
            total[k] = total.get(k, 0) + v
    return total
