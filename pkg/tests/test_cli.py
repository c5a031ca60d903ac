"""
End-to-end CLI tests: generate a tiny stream, train on it, re-evaluate and
report, and check exit codes for bad option combinations.
"""

import csv
import json
import subprocess
import sys

import pytest

from cosformer.cli import build_experiment, create_argument_parser, main
from cosformer.continual import TrainConfig
from cosformer.errors import UsageError
from cosformer.harness import validate_variant
from cosformer.model import ModelConfig

pytestmark = pytest.mark.integration

STREAM = {
    "n_tasks": 2,
    "classes_per_task": 2,
    "d_f": 8,
    "d_text": 8,
    "n_min": 4,
    "n_max": 6,
    "signal_patches": 2,
    "bags_per_class": 5,
    "seed": 1,
}


class CLITestHelper:
    """Helper class for CLI testing."""

    @staticmethod
    def run_cli(args: list[str]) -> subprocess.CompletedProcess:
        cmd = [sys.executable, "-m", "cosformer"] + args
        return subprocess.run(cmd, text=True, capture_output=True, timeout=300)

    @staticmethod
    def train(data_dir, out_dir, *extra):
        main(
            ["train", "--data", str(data_dir), "--out", str(out_dir), "--epochs", "1",
             "--patience", "1", "--clusters", "1", *extra]
        )

    @staticmethod
    def exit_code(args: list[str]) -> int:
        with pytest.raises(SystemExit) as excinfo:
            main(args)
        return excinfo.value.code


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("stream")
    config = root / "stream.json"
    config.write_text(json.dumps(STREAM))
    main(["generate", "--config", str(config), "--out", str(root / "data")])
    return root / "data"


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "full"
    CLITestHelper.train(data_dir, out)
    return out


class TestGenerate:
    def test_writes_manifest_and_bags(self, data_dir):
        manifest = json.loads((data_dir / "manifest.json").read_text())
        assert len(manifest["bags"]) == 20
        assert len(list((data_dir / "bags").glob("bag_*.bin"))) == 20
        assert manifest["config"]["d_f"] == 8

    def test_seed_overrides_config(self, tmp_path, capsys):
        main(["generate", "--out", str(tmp_path / "data"), "--seed", "9"])
        manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 9
        assert "Wrote 1500 bags over 3 tasks" in capsys.readouterr().out

    def test_bad_config_file(self, tmp_path):
        config = tmp_path / "stream.json"
        config.write_text("{")
        assert CLITestHelper.exit_code(["generate", "--config", str(config), "--out", str(tmp_path)]) == 1


class TestTrain:
    def test_run_artifacts(self, run_dir):
        for name in ("config.json", "accuracy_matrix.csv", "metrics.json", "history.json", "timing.json"):
            assert (run_dir / name).exists(), name
        assert (run_dir / "checkpoints" / "task_0.cosc").exists()
        assert (run_dir / "checkpoints" / "task_1.cosc").exists()

    def test_metrics_and_matrix(self, run_dir):
        metrics = json.loads((run_dir / "metrics.json").read_text())
        assert metrics["scenario"] == "task-il"
        assert metrics["order"] == [0, 1]
        assert len(metrics["final_accuracies"]) == 2
        assert 0.0 <= metrics["average_accuracy"] <= 1.0
        assert len(metrics["forgetting"]) == 1
        with (run_dir / "accuracy_matrix.csv").open() as handle:
            rows = list(csv.DictReader(handle))
        assert [(r["stage"], r["task"]) for r in rows] == [("0", "0"), ("1", "0"), ("1", "1")]

    def test_history_has_one_trace_per_task(self, run_dir):
        history = json.loads((run_dir / "history.json").read_text())
        assert [t["task_id"] for t in history] == [0, 1]
        assert all(len(t["epochs"]) == 1 for t in history)

    def test_same_seed_reproduces_outputs(self, data_dir, tmp_path):
        CLITestHelper.train(data_dir, tmp_path / "a", "--seed", "3")
        CLITestHelper.train(data_dir, tmp_path / "b", "--seed", "3")
        for name in ("metrics.json", "accuracy_matrix.csv", "history.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_class_il_linear_head_without_buffer(self, data_dir, tmp_path, capsys):
        CLITestHelper.train(
            data_dir, tmp_path / "run", "--scenario", "class-il", "--linear-head", "--no-ec",
            "--buffer", "none",
        )
        out = capsys.readouterr().out
        assert "Scenario: class-il" in out
        assert "Average accuracy" in out

    def test_reverse_order(self, data_dir, tmp_path):
        CLITestHelper.train(data_dir, tmp_path / "run", "--order", "1,0")
        metrics = json.loads((tmp_path / "run" / "metrics.json").read_text())
        assert metrics["order"] == [1, 0]

    def test_no_woi_under_class_il_is_a_usage_error(self, data_dir, tmp_path):
        args = ["train", "--data", str(data_dir), "--out", str(tmp_path / "run"),
                "--scenario", "class-il", "--no-woi"]
        assert CLITestHelper.exit_code(args) == 2

    def test_linear_head_implies_no_woi(self, data_dir, tmp_path):
        parser = create_argument_parser()
        for extra in ([], ["--no-woi"], ["--scenario", "class-il", "--no-woi"]):
            args = parser.parse_args(
                ["train", "--data", str(data_dir), "--out", str(tmp_path), "--linear-head", *extra]
            )
            experiment = build_experiment(args)
            assert experiment.train.use_woi is False
            validate_variant(experiment.train, experiment.model)

    def test_woi_masking_with_linear_head_is_a_usage_error(self):
        with pytest.raises(UsageError, match="linear-head"):
            validate_variant(TrainConfig(use_woi=True), ModelConfig(head="linear"))

    def test_no_woi_with_decoder_under_task_il_is_accepted(self):
        validate_variant(TrainConfig(use_woi=False), ModelConfig())

    def test_bad_order(self, data_dir, tmp_path):
        for order in ("1,1", "a,b", "0,1,2"):
            args = ["train", "--data", str(data_dir), "--out", str(tmp_path / "run"), "--order", order]
            assert CLITestHelper.exit_code(args) == 2

    def test_missing_data_dir(self, tmp_path):
        args = ["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "run")]
        assert CLITestHelper.exit_code(args) == 1

    def test_unknown_scenario_rejected_by_parser(self, data_dir, tmp_path):
        args = ["train", "--data", str(data_dir), "--out", str(tmp_path), "--scenario", "domain-il"]
        assert CLITestHelper.exit_code(args) == 2


class TestEvalAndReport:
    def test_eval_writes_result(self, run_dir, capsys):
        main(["eval", "--run", str(run_dir), "--scenario", "class-il"])
        result = json.loads((run_dir / "eval_class-il.json").read_text())
        assert result["scenario"] == "class-il"
        assert result["stage"] == 1
        assert len(result["accuracies"]) == 2
        assert "checkpoint after task 1" in capsys.readouterr().out

    def test_report_recomputes_metrics(self, run_dir):
        before = json.loads((run_dir / "metrics.json").read_text())
        main(["report", "--run", str(run_dir)])
        after = json.loads((run_dir / "metrics.json").read_text())
        assert after["average_accuracy"] == before["average_accuracy"]
        assert after["forgetting"] == before["forgetting"]

    def test_report_with_embeddings(self, run_dir):
        main(["report", "--run", str(run_dir), "--emit-embeddings"])
        with (run_dir / "embeddings.csv").open() as handle:
            rows = list(csv.reader(handle))
        assert rows[0][:3] == ["bag_id", "task", "class"]
        assert len(rows) == 1 + 4
        silhouette = json.loads((run_dir / "metrics.json").read_text())["silhouette"]
        assert -1.0 <= silhouette <= 1.0

    def test_report_on_missing_run(self, tmp_path):
        assert CLITestHelper.exit_code(["report", "--run", str(tmp_path)]) == 1


class TestModuleEntryPoint:
    def test_version(self):
        result = CLITestHelper.run_cli(["--version"])
        assert result.returncode == 0, result.stderr
        assert "cosformer" in result.stdout

    def test_subprocess_generate_and_train(self, tmp_path):
        config = tmp_path / "stream.json"
        config.write_text(json.dumps(STREAM))
        result = CLITestHelper.run_cli(
            ["generate", "--config", str(config), "--out", str(tmp_path / "data")]
        )
        assert result.returncode == 0, result.stderr
        result = CLITestHelper.run_cli(
            ["train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "run"),
             "--epochs", "1", "--patience", "1"]
        )
        assert result.returncode == 0, result.stderr
        assert "Average accuracy" in result.stdout

    def test_subprocess_missing_run(self, tmp_path):
        result = CLITestHelper.run_cli(["eval", "--run", str(tmp_path), "--scenario", "class-il"])
        assert result.returncode == 1
        assert "Error:" in result.stderr
