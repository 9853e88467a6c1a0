"""Compare the compiled and pure-Python page-store backends.

Times three things per backend: raw translations through the store, an
end-to-end scenario replay, and a fuzz trace under the full per-event
audit. Reports from both backends are checked for equality so the speedup
is never bought with a behavioural difference.

    python3 benchmarks/bench_kernels.py [--repeat N] [--size-mb M]
"""

from __future__ import annotations

import argparse
import random
import sys
import time

from ptsim.fuzz import random_trace
from ptsim.policy import ReplicationPolicy
from ptsim.store import available_backends, store_class
from ptsim.syscalls import Simulator
from ptsim.topology import build_topology
from ptsim.workloads import ScenarioSpec, gen_scenario


def _best(fn, repeat: int) -> tuple[float, object]:
    best = float("inf")
    result = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - t0)
    return best, result


def bench_walks(backend: str, n: int = 200_000) -> float:
    store = store_class(backend)(4, 9, 2)
    root = store.alloc(0, 0, 0)
    rng = random.Random(1)
    vpns = [rng.randrange(1 << 20) for _ in range(n)]
    for v in vpns[:2000]:
        store.link_path(root, v, 0, -1)
    t0 = time.perf_counter()
    for v in vpns:
        store.walk(root, v, 1)
    return time.perf_counter() - t0


def bench_scenario(backend: str, size_mb: int):
    topo = build_topology(2, 2)
    events = gen_scenario(ScenarioSpec("touch_once_traversal", {"size": size_mb << 20, "passes": 2}, 1), topo)
    sim = Simulator(topo, ReplicationPolicy.parse("lazy"), store_cls=store_class(backend))
    return sim.run(events)


def bench_audit(backend: str):
    topo = build_topology(4, 2)
    events = random_trace(0, 2000, topo)
    sim = Simulator(topo, ReplicationPolicy.parse("lazy@3+opt"), audit="full", store_cls=store_class(backend))
    return sim.run(events)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--size-mb", type=int, default=64, help="traversal size for the scenario benchmark")
    args = ap.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the Python fallback is available", file=sys.stderr)
    rows = []
    reports = {}
    for backend in backends:
        walks = min(bench_walks(backend) for _ in range(args.repeat))
        scen, scen_report = _best(lambda: bench_scenario(backend, args.size_mb), args.repeat)
        audit, audit_report = _best(lambda: bench_audit(backend), args.repeat)
        reports[backend] = (scen_report, audit_report)
        rows.append((backend, walks, scen, audit))

    print(f"{'backend':<8} {'walks(s)':>10} {'scenario(s)':>12} {'full-audit(s)':>14}")
    for backend, walks, scen, audit in rows:
        print(f"{backend:<8} {walks:>10.3f} {scen:>12.3f} {audit:>14.3f}")
    if len(rows) == 2:
        (_, w0, s0, a0), (_, w1, s1, a1) = rows
        print(f"{'speedup':<8} {w1 / w0:>9.1f}x {s1 / s0:>11.1f}x {a1 / a0:>13.1f}x")
        if reports["cython"] != reports["python"]:
            print("backends disagree on the resulting reports", file=sys.stderr)
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
