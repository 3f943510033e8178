"""
Opsense — CLI tests (opsense/cli.py, opsense/harness/cli.py)
Argument parsing, exit codes and error output.

Pattern: uvicorn is mocked through sys.modules so no server starts; the
harness entry points that would spawn processes are patched out.
"""

import json
import sys
from unittest.mock import MagicMock, patch

import pytest

from opsense import cli
from opsense.harness import cli as bench_cli
from opsense.harness import default_topology
from opsense.harness.report import ExperimentReport
from opsense.harness.topology import ClientEndpoint, RunPlan
from opsense.models import NodeConfig
from opsense.wire import save_file

from .conftest import sensor_cfg


@pytest.fixture
def node_config(tmp_path):
    path = tmp_path / "node.json"
    save_file(path, NodeConfig(node_id="edge", listen="127.0.0.1:0", sensors=(sensor_cfg(),)))
    return path


def _run(main, argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    return exc.value.code


class TestNodeCommand:
    def test_starts_uvicorn_on_configured_address(self, node_config):
        mock_uvicorn = MagicMock()
        with patch.dict(sys.modules, {"uvicorn": mock_uvicorn}):
            cli.main(["node", "--config", str(node_config)])
        _, kwargs = mock_uvicorn.run.call_args
        assert (kwargs["host"], kwargs["port"]) == ("127.0.0.1", 0)
        assert kwargs["log_level"] == "warning"

    def test_listen_override(self, node_config):
        mock_uvicorn = MagicMock()
        with patch.dict(sys.modules, {"uvicorn": mock_uvicorn}):
            cli.main(["--log-level", "info", "node", "--config", str(node_config), "--listen", "127.0.0.1:0"])
        _, kwargs = mock_uvicorn.run.call_args
        assert kwargs["log_level"] == "info"

    def test_missing_config_file(self, tmp_path, capsys):
        with patch.dict(sys.modules, {"uvicorn": MagicMock()}):
            assert _run(cli.main, ["node", "--config", str(tmp_path / "nope.json")]) == 1
        assert "Error [BAD_REQUEST]" in capsys.readouterr().err

    def test_invalid_config_lists_violations(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        save_file(path, NodeConfig(node_id="edge", sensors=(sensor_cfg(history_size=0),)))
        with patch.dict(sys.modules, {"uvicorn": MagicMock()}):
            assert _run(cli.main, ["node", "--config", str(path)]) == 1
        err = capsys.readouterr().err
        assert "Error [CONFIG_INVALID]" in err
        assert "HISTORY_SIZE_NONPOSITIVE" in err

    def test_command_required(self):
        assert _run(cli.main, []) == 2

    def test_invalid_log_level(self, node_config):
        assert _run(cli.main, ["--log-level", "loud", "node", "--config", str(node_config)]) == 2


class TestValidateCommand:
    def test_ok(self, node_config, capsys):
        cli.main(["validate", "--config", str(node_config)])
        assert "ok (1 sensors)" in capsys.readouterr().out

    def test_violations_exit_1(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        save_file(path, NodeConfig(node_id="edge", sensors=(sensor_cfg(plugin="thermo"),)))
        assert _run(cli.main, ["validate", "--config", str(path)]) == 1
        assert "PLUGIN_UNKNOWN" in capsys.readouterr().out


class TestPluginsCommand:
    def test_lists_descriptors(self, plugin_dir, capsys):
        (plugin_dir / "broken.plugin").write_text("{", encoding="utf-8")
        cli.main(["plugins", "--dir", str(plugin_dir), "--json"])
        out, err = capsys.readouterr()
        assert out.startswith("level\t[value]")
        assert json.loads(out.split("\n", 1)[1])[0]["plugin_name"] == "level"
        assert "skipped" in err


class TestBenchTopology:
    def test_prints_spec(self, capsys):
        bench_cli.main(["topology", "--clients", "2", "--sensors", "3", "--requests", "4", "--mode", "push"])
        spec = json.loads(capsys.readouterr().out)
        assert len(spec["clients"]) == 2
        assert spec["mode"] == "push"
        assert spec["requests_per_client"] == 4


class TestBenchStorage:
    def test_writes_outputs(self, tmp_path, capsys):
        bench_cli.main(["storage", "--history", "10", "--duration", "60", "--out", str(tmp_path)])
        out = capsys.readouterr().out
        assert "linear_ok: True" in out
        assert "flat_ok: True" in out
        assert (tmp_path / "storage.csv").exists()

    def test_invalid_history(self, capsys):
        assert _run(bench_cli.main, ["storage", "--history", "0", "--duration", "60"]) == 1
        assert "Error [BAD_REQUEST]" in capsys.readouterr().err


class TestBenchRecompute:
    def _log(self, tmp_path):
        lines = [
            {"event": "run", "t": 0.0, "streams": [{"stream": "a"}, {"stream": "b"}]},
            {"event": "deliver", "t": 10.0, "stream": "a"},
            {"event": "deliver", "t": 20.0, "stream": "a"},
            {"event": "deliver", "t": 30.0, "stream": "a"},
            {"event": "deliver", "t": 40.0, "stream": "b"},
            {"event": "end", "t": 60_000.0, "elapsed_ms": 60_000.0, "complete": True},
        ]
        path = tmp_path / "events.jsonl"
        path.write_text("".join(json.dumps(x) + "\n" for x in lines), encoding="utf-8")
        return path

    def test_prints_metrics(self, tmp_path, capsys):
        bench_cli.main(["recompute", "--log", str(self._log(tmp_path))])
        out = capsys.readouterr().out
        assert "avg_time_per_request_ms: 15000.0" in out
        assert "share[a]: 75.0" in out

    def test_matching_summary(self, tmp_path, capsys):
        (tmp_path / "summary.txt").write_text("avg_time_per_request_ms: 15000.0\n", encoding="utf-8")
        (tmp_path / "shares.csv").write_text("stream,completions,share_pct\na,3,75.0\nb,1,25.0\n", encoding="utf-8")
        bench_cli.main(["recompute", "--log", str(self._log(tmp_path)), "--summary", str(tmp_path / "summary.txt")])
        assert "matches" in capsys.readouterr().out

    def test_mismatch_exit_code(self, tmp_path, capsys):
        (tmp_path / "summary.txt").write_text("avg_time_per_request_ms: 14000.0\n", encoding="utf-8")
        argv = ["recompute", "--log", str(self._log(tmp_path)), "--summary", str(tmp_path / "summary.txt")]
        assert _run(bench_cli.main, argv) == bench_cli.EXIT_MISMATCH
        assert "MISMATCH avg_time_per_request_ms" in capsys.readouterr().err


class TestBenchRun:
    def _spec(self, tmp_path):
        path = tmp_path / "spec.json"
        save_file(path, default_topology(clients=1, sensors_per_client=1, requests_per_client=1, duration=10))
        return path

    def test_complete_run(self, tmp_path, capsys):
        report = ExperimentReport(mode="pull", complete=True, avg_time_per_request_ms=500.0)
        with patch("opsense.harness.runner.run_experiment", return_value=report) as run:
            bench_cli.main(["run", "--spec", str(self._spec(tmp_path)), "--out", str(tmp_path / "out")])
        assert run.call_args.args[1] == tmp_path / "out"
        assert "avg_time_per_request_ms: 500.0" in capsys.readouterr().out

    def test_incomplete_run_exit_2(self, tmp_path, capsys):
        report = ExperimentReport(mode="pull", complete=False)
        with patch("opsense.harness.runner.run_experiment", return_value=report):
            argv = ["run", "--spec", str(self._spec(tmp_path)), "--out", str(tmp_path / "out")]
            assert _run(bench_cli.main, argv) == 2
        out, err = capsys.readouterr()
        assert "avg_time_per_request_ms: undefined" in out
        assert "incomplete" in err

    def test_bad_spec(self, tmp_path, capsys):
        path = tmp_path / "spec.json"
        path.write_text('{"clients": []}', encoding="utf-8")
        assert _run(bench_cli.main, ["run", "--spec", str(path), "--out", str(tmp_path / "out")]) == 1

    def test_aggregator_exit_code_passed_through(self, tmp_path):
        plan = tmp_path / "plan.json"
        save_file(
            plan,
            RunPlan(
                spec=default_topology(clients=1, sensors_per_client=1, requests_per_client=1, duration=10),
                aggregator_listen="127.0.0.1:0",
                clients=(ClientEndpoint(node_id="client0", address="127.0.0.1:1"),),
                log_path=str(tmp_path / "events.jsonl"),
            ),
        )
        with patch("opsense.harness.driver.run_aggregator", return_value=2) as run:
            assert _run(bench_cli.main, ["aggregator", "--plan", str(plan)]) == 2
        assert run.call_args.args[0].clients[0].node_id == "client0"
