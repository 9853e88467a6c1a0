import csv
import io
import math

import pytest

from ptsim.metrics import (META_COLUMNS, MetricsReport, normalized_columns, ratio, report_columns, report_csv,
                           sum_deltas)
from ptsim.policy import ReplicationPolicy
from ptsim.syscalls import Simulator
from ptsim.topology import build_topology
from ptsim.workloads import ScenarioSpec, gen_scenario

from conftest import BASE, PAGE, Trace, make_sim, run_events


class TestRecord:
    def test_page_gauge(self):
        r = MetricsReport(4)
        r.record("pt_pages", 1, node=3)
        assert r.footprint_bytes(3) == 4096 and r.footprint_bytes() == 4096
        r.record("pt_pages", -1, node=3)
        assert r.footprint_bytes() == 0 and r["pt_pages_peak"] == 1

    def test_unfiltered_shootdown_from_node0(self):
        t = Trace()
        for n in range(8):
            t("spawn", n, node=n)
        t.mmap(0, 1, BASE)
        t.access(0, BASE, "w")
        sim = run_events(make_sim(8, 2, "lazy"), t.events)
        before = sim.c["ipis_remote"]
        t("mprotect", 0, addr=BASE, length=PAGE, prot="r")
        sim.apply(t.events[-1])
        assert sim.c["ipis_remote"] - before == 7

    def test_unknown_and_negative(self):
        r = MetricsReport(2)
        with pytest.raises(KeyError):
            r.record("ipis_galactic")
        with pytest.raises(ValueError):
            r.record("shootdowns", -1)
        with pytest.raises(KeyError):
            r.record("pt_pages", 1)
        with pytest.raises(KeyError):
            r.record("pt_pages", 1, node=2)

    def test_identical_runs_identical_reports(self):
        topo = build_topology(4, 4)
        events = gen_scenario(ScenarioSpec("webserver_churn", {"iters": 10}), topo)
        a = Simulator(topo, ReplicationPolicy.parse("lazy+opt")).run(events)
        b = Simulator(topo, ReplicationPolicy.parse("lazy+opt")).run(events)
        assert a == b and report_csv(a) == report_csv(b)


def _reports(policies=("none", "eager", "lazy+opt"), nodes=8):
    topo = build_topology(nodes, 2)
    events = gen_scenario(ScenarioSpec("partitioned", {"pages_per_node": 200}), topo)
    return [Simulator(topo, ReplicationPolicy.parse(p)).run(events) for p in policies]


class TestCsv:
    def test_single_report(self):
        (r,) = _reports(("lazy",), 2)
        lines = report_csv(r).splitlines()
        assert len(lines) == 2
        assert lines[0].split(",") == report_columns(r)
        assert report_columns(r)[:4] == list(META_COLUMNS)

    def test_three_policies(self):
        reports = _reports()
        text = report_csv(reports, normalized_columns(reports, 0))
        rows = list(csv.reader(io.StringIO(text)))
        assert len(rows) == 4
        assert len({len(r) for r in rows}) == 1
        assert [r[1] for r in rows[1:]] == ["none", "eager", "lazy+opt"]

    def test_rfc4180_round_trip(self):
        r = MetricsReport(2, meta={"run_id": 'quoted, "tricky"\nid'})
        text = report_csv(r)
        rows = list(csv.DictReader(io.StringIO(text)))
        assert rows[0]["run_id"] == 'quoted, "tricky"\nid'

    def test_values_round_trip(self):
        reports = _reports()
        rows = list(csv.DictReader(io.StringIO(report_csv(reports))))
        for row, rep in zip(rows, reports):
            for name, value in rep.values().items():
                assert float(row[name]) == value

    def test_eager_footprint_ratio(self):
        none, eager, _ = _reports()
        norm = normalized_columns([none, eager], 0)
        assert norm[1]["norm_pt_pages_total"] == 8.0

    def test_baseline_row_is_one(self):
        reports = _reports()
        for base in range(3):
            assert set(normalized_columns(reports, base)[base].values()) == {1.0}

    def test_empty(self):
        assert report_csv([]).strip() == ",".join(META_COLUMNS)


class TestHelpers:
    def test_ratio(self):
        assert ratio(6, 3) == 2.0
        assert ratio(0, 0) == 1.0
        assert math.isinf(ratio(5, 0))

    def test_sum_deltas(self):
        assert sum_deltas([{"delta": {"a": 1}}, {"delta": {"a": 2, "b": 1}}]) == {"a": 3, "b": 1}

    def test_inf_formatting(self):
        reports = _reports(("none", "lazy"), 2)
        reports[1].counters["ring_links"] = 5
        reports[0].counters["ring_links"] = 0
        text = report_csv(reports, normalized_columns(reports, 0))
        row = list(csv.DictReader(io.StringIO(text)))[1]
        assert row["norm_ring_links"] == "inf"
