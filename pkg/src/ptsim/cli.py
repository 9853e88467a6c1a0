"""Command-line entry point: generate traces, run one experiment, or compare policies.

Exit codes: 0 success, 1 usage or configuration error, 2 trace error,
3 invariant violation (the earliest failing event index is printed).
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .audit import first_violation
from .errors import ConfigError, InvariantViolation, TraceError
from .metrics import MetricsReport, normalized_columns, report_csv
from .policy import Mode, ReplicationPolicy
from .syscalls import Simulator, TraceEvent
from .topology import CostParams, MachineTopology, build_topology
from .workloads import SCENARIOS, ScenarioSpec, gen_scenario, parse_trace, serialize_trace

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_TRACE = 2
EXIT_INVARIANT = 3


class UsageError(Exception):
    """Bad command line; maps to exit code 1."""


class InvariantFailure(Exception):
    """A run broke a protocol invariant; carries the earliest failing event."""

    def __init__(self, index: int, seq: int | None, message: str) -> None:
        self.index = index
        self.seq = seq
        where = f"event index {index}" + (f" (seq {seq})" if seq is not None else "")
        super().__init__(f"invariant violation at {where}: {message}")


@dataclass
class ExperimentConfig:
    nodes: int = 8
    cores: int = 18
    policy: ReplicationPolicy = field(default_factory=lambda: ReplicationPolicy(Mode.NONE))
    scenario: str | None = None
    params: dict = field(default_factory=dict)
    trace: str | None = None
    seed: int = 0
    audit: str = "sampled"
    costs: CostParams = field(default_factory=CostParams)
    interference: bool = False
    run_id: str = ""

    def __post_init__(self) -> None:
        if (self.scenario is None) == (self.trace is None):
            raise ConfigError("give exactly one of --scenario or --trace")

    def topology(self) -> MachineTopology:
        return build_topology(self.nodes, self.cores, self.costs)


def load_costs(path: str, base: CostParams | None = None) -> CostParams:
    """``key=value`` lines with ``#`` comments, overriding :class:`CostParams`."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read cost file {path}: {exc.strerror}") from None
    values: dict[str, float] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        values[key.strip()] = _number(value.strip(), f"{path}:{lineno}")
    return CostParams.from_mapping(values, base)


def _number(text: str, where: str) -> float:
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{where}: {text!r} is not a number") from None


def parse_params(items: Sequence[str]) -> dict:
    params: dict[str, str] = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--param expects k=v, got {item!r}")
        params[key] = value
    return params


def load_events(cfg: ExperimentConfig) -> list[TraceEvent]:
    if cfg.scenario is not None:
        return gen_scenario(ScenarioSpec(cfg.scenario, cfg.params, cfg.seed), cfg.topology())
    try:
        with open(cfg.trace, encoding="utf-8") as fh:
            return parse_trace(fh)
    except OSError as exc:
        raise TraceError(f"cannot read trace {cfg.trace}: {exc.strerror}") from None


def _make_sim(cfg: ExperimentConfig, policy: ReplicationPolicy, summaries: bool = False) -> Simulator:
    return Simulator(cfg.topology(), policy, audit=cfg.audit, interference=cfg.interference,
                     summaries=summaries, meta={"run_id": cfg.run_id or policy.label()})


def run_experiment(cfg: ExperimentConfig, events: Sequence[TraceEvent] | None = None,
                   policy: ReplicationPolicy | None = None, summaries: bool = False) -> Simulator:
    """Replay ``events`` (or the configured workload) and return the finished simulator.

    Raises :class:`InvariantFailure` naming the earliest event after which a
    full audit fails.
    """
    policy = policy or cfg.policy
    if events is None:
        events = load_events(cfg)
    sim = _make_sim(cfg, policy, summaries)
    try:
        sim.run(events)
    except InvariantViolation as exc:
        index = first_violation(lambda: _make_sim(cfg, policy), events)
        if index is None:
            index = getattr(exc, "event_index", len(events) - 1)
        seq = events[index].seq if 0 <= index < len(events) else None
        raise InvariantFailure(index, seq, str(exc)) from None
    return sim


def _compare_one(args: tuple[ExperimentConfig, list[TraceEvent], ReplicationPolicy]) -> MetricsReport:
    cfg, events, policy = args
    return run_experiment(cfg, events, policy).report


def compare(cfg: ExperimentConfig, policies: Sequence[ReplicationPolicy], jobs: int = 1) -> str:
    """One row per policy on the same trace, plus columns normalized to the baseline row.

    The baseline is the no-replication row, or the first row when that
    policy is not in the list.
    """
    if len(policies) < 2:
        raise UsageError("compare needs at least two policies")
    events = load_events(cfg)
    work = [(cfg, events, p) for p in policies]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_compare_one, work))
    else:
        reports = [_compare_one(w) for w in work]
    modes = [p.mode for p in policies]
    baseline = modes.index(Mode.NONE) if Mode.NONE in modes else 0
    return report_csv(reports, normalized_columns(reports, baseline))


# -- argument parsing -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _policy(args: argparse.Namespace, text: str | None = None) -> ReplicationPolicy:
    """Policy from its name plus --prefetch/--tlb-opt.

    In a comparison (``text`` given) the two flags only touch lazy entries.
    """
    base = ReplicationPolicy.parse(text or args.policy)
    if text is not None and base.mode is not Mode.LAZY:
        return base
    degree = base.prefetch_degree
    tlb = base.tlb_filter
    if args.prefetch is not None:
        degree = args.prefetch
    if args.tlb_opt is not None:
        tlb = args.tlb_opt == "on"
    if base.mode is not Mode.LAZY and (degree or tlb):
        raise ConfigError(f"--prefetch and --tlb-opt apply to the lazy policy only (got {base.mode.value})")
    return ReplicationPolicy(base.mode, degree, tlb)


def _config(args: argparse.Namespace) -> ExperimentConfig:
    costs = load_costs(args.costs) if args.costs else CostParams()
    params = parse_params(args.param)
    if args.gamma_shape is not None:
        params["gamma_shape"] = args.gamma_shape
    policy = _policy(args) if getattr(args, "policy", None) else ReplicationPolicy(Mode.NONE)
    return ExperimentConfig(nodes=args.nodes, cores=args.cores, policy=policy, scenario=args.scenario,
                            params=params, trace=args.trace, seed=args.seed, audit=args.audit,
                            costs=costs, interference=args.interference, run_id=args.run_id)


def _common(p: argparse.ArgumentParser, workload_required: bool = True) -> None:
    p.add_argument("--nodes", type=int, default=8, help="NUMA nodes (sockets)")
    p.add_argument("--cores", type=int, default=18, help="cores per node")
    src = p.add_mutually_exclusive_group(required=workload_required)
    src.add_argument("--scenario", choices=sorted(SCENARIOS), help="generate a built-in workload")
    src.add_argument("--trace", help="replay a JSONL trace file")
    p.add_argument("--param", action="append", default=[], metavar="K=V",
                   help="scenario parameter override (repeatable)")
    p.add_argument("--gamma-shape", type=float, help="shape of the malloc size distribution")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--costs", help="key=value file overriding cost parameters")
    p.add_argument("--out", help="output path (default: stdout)")


def _sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--prefetch", type=int, help="lazy prefetch degree d (copies 2^d PTEs)")
    p.add_argument("--tlb-opt", choices=("on", "off"), help="restrict shootdowns to sharer nodes")
    p.add_argument("--audit", choices=("off", "sampled", "full"), default="sampled",
                   help="invariant checks: never, every 64 events, or every event")
    p.add_argument("--interference", action="store_true", help="price remote memory with interference")
    p.add_argument("--run-id", default="", help="value of the run_id column")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ptsim", description="Page-table replication and TLB shootdown simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one experiment and print its CSV report")
    _common(run)
    run.add_argument("--policy", default="none", help="none, eager, lazy (or lazy@D+opt)")
    _sim_flags(run)
    run.add_argument("--summaries", help="write per-event summaries as JSONL to this path")

    cmp_ = sub.add_parser("compare", help="run several policies on the same trace")
    _common(cmp_)
    cmp_.add_argument("--policies", required=True, help="comma-separated list, e.g. none,eager,lazy+opt")
    _sim_flags(cmp_)
    cmp_.add_argument("--jobs", type=int, default=1, help="runs to execute in parallel")

    gen = sub.add_parser("gen", help="write a scenario's trace as JSONL")
    _common(gen)
    return parser


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _dispatch(args: argparse.Namespace) -> None:
    if args.command == "gen":
        if args.scenario is None:
            raise UsageError("gen needs --scenario")
        args.policy = None
        args.audit = "off"
        args.interference = False
        args.run_id = ""
        cfg = _config(args)
        _emit(serialize_trace(load_events(cfg)), args.out)
        return
    cfg = _config(args)
    if args.command == "run":
        sim = run_experiment(cfg, summaries=args.summaries is not None)
        _emit(report_csv(sim.report), args.out)
        if args.summaries:
            with open(args.summaries, "w", encoding="utf-8") as fh:
                for s in sim.summaries:
                    fh.write(json.dumps(s, separators=(",", ":"), sort_keys=True) + "\n")
        return
    names = [p for p in args.policies.split(",") if p.strip()]
    policies = [_policy(args, name) for name in names]
    _emit(compare(cfg, policies, args.jobs), args.out)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _dispatch(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TraceError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_TRACE
    except InvariantFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
