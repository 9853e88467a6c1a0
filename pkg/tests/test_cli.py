import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

import ptsim.syscalls
from ptsim.cli import EXIT_INVARIANT, EXIT_OK, EXIT_TRACE, EXIT_USAGE, ExperimentConfig, load_costs, main
from ptsim.errors import ConfigError, InvariantViolation
from ptsim.metrics import sum_deltas
from ptsim.workloads import parse_trace

GOLDEN = Path(__file__).parent / "golden"


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def trace_file(tmp_path, capsys):
    path = tmp_path / "t.jsonl"
    code, _, _ = run_cli(capsys, "gen", "--nodes", "4", "--cores", "4", "--scenario", "webserver_churn",
                         "--param", "iters=15", "--seed", "4", "--out", str(path))
    assert code == EXIT_OK
    return path


class TestRun:
    def test_partitioned_single_sharers(self, capsys):
        code, out, _ = run_cli(capsys, "run", "--scenario", "partitioned", "--policy", "lazy", "--nodes", "4",
                               "--param", "pages_per_node=500")
        assert code == EXIT_OK
        (row,) = rows(out)
        assert row["sharers_nonroot_min"] == row["sharers_nonroot_max"] == "1"
        assert row["sharers_root_max"] == "4"

    def test_trace_runs_are_byte_identical(self, capsys, trace_file):
        outs = [run_cli(capsys, "run", "--trace", str(trace_file), "--policy", "eager", "--nodes", "4",
                        "--cores", "4")[1] for _ in range(2)]
        assert outs[0] == outs[1] and outs[0]

    def test_trace_matches_scenario(self, capsys, trace_file):
        common = ["--nodes", "4", "--cores", "4", "--policy", "lazy+opt"]
        a = run_cli(capsys, "run", "--trace", str(trace_file), *common)[1]
        b = run_cli(capsys, "run", "--scenario", "webserver_churn", "--param", "iters=15", "--seed", "4",
                    *common)[1]
        assert a == b

    def test_malformed_trace(self, capsys, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"seq":1,"proc":0,"thread":0,"op":"spawn","node":0}\n{"seq":2,"proc":0\n')
        code, _, err = run_cli(capsys, "run", "--trace", str(path))
        assert code == EXIT_TRACE and "line 2" in err

    def test_missing_trace_file(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "run", "--trace", str(tmp_path / "nope.jsonl"))
        assert code == EXIT_TRACE and "cannot read" in err

    @pytest.mark.parametrize("argv", [
        ["run", "--scenario", "nonsense"],
        ["run", "--scenario", "partitioned", "--param", "bogus=1"],
        ["run", "--scenario", "partitioned", "--param", "novalue"],
        ["run", "--scenario", "partitioned", "--policy", "eager", "--prefetch", "3"],
        ["run", "--scenario", "partitioned", "--policy", "replicate-all"],
        ["run", "--scenario", "partitioned", "--nodes", "0"],
        ["run", "--scenario", "partitioned", "--trace", "x.jsonl"],
        ["run"],
        [],
    ])
    def test_usage_errors(self, capsys, argv):
        code, _, err = run_cli(capsys, *argv)
        assert code == EXIT_USAGE and err

    def test_prefetch_and_tlb_flags(self, capsys):
        code, out, _ = run_cli(capsys, "run", "--scenario", "touch_once_traversal", "--nodes", "2", "--cores", "1",
                               "--param", "size=8388608", "--policy", "lazy", "--prefetch", "9",
                               "--tlb-opt", "on", "--run-id", "x1")
        (row,) = rows(out)
        assert (row["run_id"], row["policy"], row["prefetch"], row["tlb_opt"]) == ("x1", "lazy@9+opt", "9", "on")
        assert row["owner_consults"] == "4"

    def test_summaries_add_up(self, capsys, tmp_path):
        path = tmp_path / "s.jsonl"
        code, out, _ = run_cli(capsys, "run", "--scenario", "munmap_loop", "--nodes", "2", "--cores", "2",
                               "--param", "iters=20", "--param", "spinners_per_socket=1", "--policy", "lazy",
                               "--summaries", str(path))
        assert code == EXIT_OK
        summaries = [json.loads(line) for line in path.read_text().splitlines()]
        (row,) = rows(out)
        assert len(summaries) == int(row["events"])
        for name, value in sum_deltas(summaries).items():
            assert float(row[name]) == pytest.approx(value), name

    def test_out_file(self, capsys, tmp_path):
        path = tmp_path / "r.csv"
        code, out, _ = run_cli(capsys, "run", "--scenario", "partitioned", "--nodes", "2",
                               "--param", "pages_per_node=10", "--out", str(path))
        assert code == EXIT_OK and out == "" and len(path.read_text().splitlines()) == 2

    def test_invariant_violation_names_first_event(self, capsys, monkeypatch):
        real = ptsim.syscalls.audit_simulator

        def broken(sim):
            real(sim)
            if sim.events_applied > 5:
                raise InvariantViolation("planted")

        monkeypatch.setattr(ptsim.syscalls, "audit_simulator", broken)
        code, _, err = run_cli(capsys, "run", "--scenario", "partitioned", "--nodes", "2",
                               "--param", "pages_per_node=100")
        assert code == EXIT_INVARIANT
        assert "event index 5 (seq 6)" in err and "planted" in err


class TestCompare:
    def test_mprotect_sweep(self, capsys):
        code, out, _ = run_cli(capsys, "compare", "--scenario", "mprotect_loop", "--param", "iters=200",
                               "--policies", "none,eager,lazy+opt")
        assert code == EXIT_OK
        by = {r["policy"]: r for r in rows(out)}
        assert float(by["lazy+opt"]["norm_cost_total"]) == pytest.approx(1.0, abs=0.05)
        assert float(by["eager"]["norm_cost_total"]) > 1.0

    def test_mprotect_sweep_with_spinners(self, capsys):
        _, out, _ = run_cli(capsys, "compare", "--scenario", "mprotect_loop", "--param", "iters=200",
                            "--param", "spinners_per_socket=1", "--policies", "none,eager,lazy+opt")
        by = {r["policy"]: r for r in rows(out)}
        assert float(by["lazy+opt"]["norm_cost_total"]) < 1.0 < float(by["eager"]["norm_cost_total"])

    def test_munmap_remote_updates(self, capsys):
        code, out, _ = run_cli(capsys, "compare", "--scenario", "munmap_loop", "--param", "iters=100",
                               "--policies", "eager,lazy+opt")
        by = {r["policy"]: r for r in rows(out)}
        lazy_updates = int(by["lazy+opt"]["replica_updates_local"]) + int(by["lazy+opt"]["replica_updates_remote"])
        assert int(by["eager"]["replica_updates_remote"]) == 7 * lazy_updates == 700

    def test_needs_two_policies(self, capsys):
        code, _, err = run_cli(capsys, "compare", "--scenario", "mprotect_loop", "--policies", "lazy")
        assert code == EXIT_USAGE and "two policies" in err

    def test_baseline_row_is_exactly_one(self, capsys):
        _, out, _ = run_cli(capsys, "compare", "--scenario", "kv_churn", "--nodes", "4", "--cores", "4",
                            "--param", "iters=50", "--policies", "lazy+opt,none,eager")
        base = rows(out)[1]
        assert base["policy"] == "none"
        norms = [v for k, v in base.items() if k.startswith("norm_")]
        assert norms and set(norms) == {"1"}

    def test_parallel_matches_serial(self, capsys):
        argv = ["compare", "--scenario", "webserver_churn", "--nodes", "4", "--cores", "4",
                "--param", "iters=10", "--policies", "none,eager,lazy,lazy+opt"]
        serial = run_cli(capsys, *argv)[1]
        parallel = run_cli(capsys, *argv, "--jobs", "3")[1]
        assert serial == parallel

    def test_prefetch_flag_only_touches_lazy(self, capsys):
        _, out, _ = run_cli(capsys, "compare", "--scenario", "partitioned", "--nodes", "2",
                            "--param", "pages_per_node=10", "--policies", "none,lazy", "--prefetch", "4")
        assert [r["policy"] for r in rows(out)] == ["none", "lazy@4"]

    def test_golden(self, capsys):
        _, out, _ = run_cli(capsys, "compare", "--nodes", "4", "--cores", "4", "--scenario", "mprotect_loop",
                            "--param", "spinners_per_socket=2", "--param", "iters=40",
                            "--policies", "none,eager,lazy,lazy+opt", "--seed", "3")
        assert out == (GOLDEN / "mprotect_loop_4x4.csv").read_text()


class TestGenAndConfig:
    def test_gen_round_trips(self, trace_file):
        events = parse_trace(trace_file.read_text())
        assert events and events[0].op == "spawn"

    def test_gen_needs_scenario(self, capsys):
        code, _, _ = run_cli(capsys, "gen", "--trace", "x.jsonl")
        assert code == EXIT_USAGE

    def test_cost_file(self, tmp_path):
        path = tmp_path / "costs.cfg"
        path.write_text("# slower interconnect\nremote_mem = 6   # per access\n\nipi_remote=500\n")
        costs = load_costs(str(path))
        assert costs.remote_mem == 6 and costs.ipi_remote == 500 and costs.local_mem == 1

    @pytest.mark.parametrize("text,where", [("remote_mem 6\n", ":1:"), ("\nipi_local=abc\n", ":2:"),
                                            ("warp_speed=9\n", "warp_speed")])
    def test_bad_cost_file(self, tmp_path, text, where):
        path = tmp_path / "costs.cfg"
        path.write_text(text)
        with pytest.raises(ConfigError, match=where):
            load_costs(str(path))

    def test_cost_file_changes_results(self, capsys, tmp_path):
        path = tmp_path / "costs.cfg"
        path.write_text("ipi_remote=1000\n")
        argv = ["run", "--scenario", "mprotect_loop", "--param", "iters=10", "--param", "spinners_per_socket=1"]
        base = rows(run_cli(capsys, *argv)[1])[0]
        dear = rows(run_cli(capsys, *argv, "--costs", str(path))[1])[0]
        assert float(dear["cost_ipi"]) - float(base["cost_ipi"]) == 10 * 7 * (1000 - 120)

    def test_bad_cost_file_exit_code(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "run", "--scenario", "partitioned", "--costs", str(tmp_path / "none.cfg"))
        assert code == EXIT_USAGE and "cost file" in err

    def test_config_needs_one_workload(self):
        with pytest.raises(ConfigError):
            ExperimentConfig()
        with pytest.raises(ConfigError):
            ExperimentConfig(scenario="partitioned", trace="t.jsonl")

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "ptsim", "run", "--scenario", "partitioned", "--nodes", "2",
                               "--param", "pages_per_node=5"], capture_output=True, text=True, check=False)
        assert proc.returncode == 0 and proc.stdout.startswith("run_id,policy,")
