import json
from unittest import mock

import click
import pytest
from click.testing import CliRunner

from graphbridge import cli
from graphbridge.cli import float_list, main_group
from graphbridge.exceptions import BridgeNumericalError, BridgeValidationError
from graphbridge.fixtures import TINY_DIMACS


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def chain_yaml(write_config, small_train):
    return write_config(
        {
            "fixture": {"name": "three_node_chain"},
            "train": {**small_train, "K": 8},
            "eval": {"rollouts": 100},
        }
    )


class TestFloatList:
    def test_values(self):
        assert float_list(None, None, "0,0.1, 0.5") == [0.0, 0.1, 0.5]

    def test_trailing_comma(self):
        assert float_list(None, None, "1,") == [1.0]

    def test_none(self):
        assert float_list(None, None, None) is None

    def test_garbage(self):
        with pytest.raises(click.BadParameter):
            float_list(None, None, "0,abc")


class TestTopLevel:
    def test_help(self, runner):
        result = runner.invoke(main_group, ["--help"])
        assert result.exit_code == 0
        for command in ("train", "eval", "baseline", "assign", "sweep-lambda"):
            assert command in result.output

    def test_version(self, runner):
        result = runner.invoke(main_group, ["--version"])
        assert result.exit_code == 0
        assert "graphbridge version" in result.output
        assert "Properly installed" in result.output

    def test_version_reports_broken_install(self, runner):
        with mock.patch.object(
            cli.VersionMessage, "quick_test", return_value="Unknown installation error"
        ):
            result = runner.invoke(main_group, ["--version"])
        assert "Unknown installation error" in result.output


class TestTrain:
    def test_train(self, runner, chain_yaml, tmp_path):
        out_dir = tmp_path / "run"
        result = runner.invoke(
            main_group, ["train", "--config", str(chain_yaml), "--out-dir", str(out_dir)]
        )
        assert result.exit_code == 0, result.output
        assert (out_dir / "checkpoints" / "final.ckpt").exists()
        assert "Created" in result.output

    def test_missing_config(self, runner, tmp_path):
        result = runner.invoke(
            main_group,
            ["train", "--config", str(tmp_path / "nope.yml"), "--out-dir", str(tmp_path)],
        )
        assert result.exit_code == 2
        assert "nope.yml" in result.output

    def test_invalid_config(self, runner, write_config, tmp_path):
        config = write_config({"fixture": {"name": "three_node_chain"}, "bogus": 1})
        result = runner.invoke(
            main_group, ["train", "--config", str(config), "--out-dir", str(tmp_path)]
        )
        assert result.exit_code == 2
        assert "bogus" in result.output
        assert "--debug-internals" in result.output

    def test_numerical_failure_exit_code(self, runner, chain_yaml, tmp_path):
        with mock.patch.object(
            cli, "run_training", side_effect=BridgeNumericalError("Loss became nan")
        ):
            result = runner.invoke(
                main_group, ["train", "--config", str(chain_yaml), "--out-dir", str(tmp_path)]
            )
        assert result.exit_code == 3
        assert "Loss became nan" in result.output

    def test_debug_internals_raises(self, runner, write_config, tmp_path):
        config = write_config({"fixture": {"name": "no_such_fixture"}})
        result = runner.invoke(
            main_group,
            [
                "--debug-internals",
                "train",
                "--config",
                str(config),
                "--out-dir",
                str(tmp_path),
            ],
        )
        assert isinstance(result.exception, BridgeValidationError)

    def test_workers_from_environment(self, runner, chain_yaml, tmp_path):
        with mock.patch.object(cli, "run_training") as run_training:
            result = runner.invoke(
                main_group,
                ["train", "--config", str(chain_yaml), "--out-dir", str(tmp_path)],
                env={cli.WORKERS_ENVVAR: "4"},
            )
        assert result.exit_code == 0, result.output
        assert run_training.call_args.kwargs["workers"] == 4

    def test_zero_workers(self, runner, chain_yaml, tmp_path):
        result = runner.invoke(
            main_group,
            ["train", "--config", str(chain_yaml), "--workers", "0"],
        )
        assert result.exit_code == 2


class TestOtherCommands:
    def test_eval(self, runner, chain_yaml, tmp_path):
        runner.invoke(
            main_group, ["train", "--config", str(chain_yaml), "--out-dir", str(tmp_path / "t")]
        )
        result = runner.invoke(
            main_group,
            [
                "eval",
                "--config",
                str(chain_yaml),
                "--checkpoint",
                str(tmp_path / "t" / "checkpoints" / "final.ckpt"),
                "--out-dir",
                str(tmp_path / "e"),
            ],
        )
        assert result.exit_code == 0, result.output
        assert (tmp_path / "e" / "metrics.json").exists()

    def test_baseline(self, runner, chain_yaml, tmp_path):
        result = runner.invoke(
            main_group,
            [
                "baseline",
                "--config",
                str(chain_yaml),
                "--method",
                "w1flow",
                "--out-dir",
                str(tmp_path),
            ],
        )
        assert result.exit_code == 0, result.output
        assert json.loads((tmp_path / "metrics.json").read_text())["method"] == "w1flow"

    def test_unknown_baseline(self, runner, chain_yaml, tmp_path):
        result = runner.invoke(
            main_group,
            ["baseline", "--config", str(chain_yaml), "--method", "teleport"],
        )
        assert result.exit_code == 2
        assert "Unknown baseline" in result.output

    def test_sweep_lambda(self, runner, chain_yaml, tmp_path):
        with mock.patch.object(cli, "run_lambda_sweep") as sweep:
            result = runner.invoke(
                main_group,
                ["sweep-lambda", "--config", str(chain_yaml), "--values", "0,0.2"],
            )
        assert result.exit_code == 0, result.output
        assert sweep.call_args.args[1] == [0.0, 0.2]

    def test_sweep_lambda_bad_values(self, runner, chain_yaml):
        result = runner.invoke(
            main_group,
            ["sweep-lambda", "--config", str(chain_yaml), "--values", "low,high"],
        )
        assert result.exit_code == 2
        assert "comma-separated" in result.output

    def test_oracle_kind_choice(self, runner, chain_yaml):
        result = runner.invoke(
            main_group, ["oracle", "--config", str(chain_yaml), "--kind", "magic"]
        )
        assert result.exit_code == 2

    def test_rollout_export(self, runner, chain_yaml, tmp_path):
        result = runner.invoke(
            main_group,
            [
                "rollout-export",
                "--config",
                str(chain_yaml),
                "--rollouts",
                "5",
                "--no-csv",
                "--out-dir",
                str(tmp_path),
            ],
        )
        assert result.exit_code == 0, result.output
        assert (tmp_path / "trace.bin").exists()
        assert not (tmp_path / "trace.csv").exists()

    def test_assign_prints_metrics(self, runner, tmp_path):
        metrics = {"n": 2, "cost_gap": 0.0}
        with mock.patch.object(
            cli, "run_assignment", return_value=mock.Mock(metrics=metrics)
        ) as run_assignment:
            result = runner.invoke(
                main_group, ["assign", "--n", "2", "--seed", "4", "--out-dir", str(tmp_path)]
            )
        assert result.exit_code == 0, result.output
        assert json.loads(result.output) == metrics
        assert run_assignment.call_args.kwargs["seed"] == 4

    def test_describe_fixture(self, runner):
        result = runner.invoke(main_group, ["describe", "--fixture", "three_node_chain"])
        assert result.exit_code == 0, result.output
        assert json.loads(result.output)["node_count"] == 3

    def test_describe_dimacs(self, runner):
        result = runner.invoke(main_group, ["describe", str(TINY_DIMACS)])
        assert result.exit_code == 0, result.output
        assert json.loads(result.output)["arc_count"] == 20

    def test_describe_nothing(self, runner):
        result = runner.invoke(main_group, ["describe"])
        assert result.exit_code == 2
        assert "either a file or a fixture" in result.output
