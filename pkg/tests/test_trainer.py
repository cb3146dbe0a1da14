from io import StringIO
import json

import numpy as np
import pytest

from graphbridge import trainer as trainer_module
from graphbridge.checkpoints import load_checkpoint
from graphbridge.exceptions import BridgeNumericalError, BridgeValidationError
from graphbridge.fixtures import load_fixture
from graphbridge.objectives import TableGradients
from graphbridge.output_streams import JSONLinesOutputStream
from graphbridge.run_config import TrainConfig
from graphbridge.trainer import (
    DIAGNOSTIC_CHECKPOINT,
    Trainer,
    checkpoint_name,
    evaluate,
    learning_rate_at,
    train,
)


def small_config(**changes):
    values = {"iterations": 3, "rollouts": 64, "inner_steps": 2, "seed": 0}
    values.update(changes)
    return TrainConfig.parse_data(values)


def without_wallclock(log):
    return [{k: v for k, v in row.items() if k != "wallclock"} for row in log]


class TestSchedule:
    def test_linear_decay(self):
        config = small_config(iterations=11, learning_rate=0.1, final_lr_fraction=0.1)
        assert learning_rate_at(config, 0) == pytest.approx(0.1)
        assert learning_rate_at(config, 10) == pytest.approx(0.01)
        assert learning_rate_at(config, 5) == pytest.approx(0.055)

    def test_single_iteration(self):
        config = small_config(iterations=1)
        assert learning_rate_at(config, 0) == config.learning_rate

    def test_checkpoint_name(self):
        assert checkpoint_name(12) == "checkpoint-00012.ckpt"


class TestTrainer:
    def test_single_node_converges_immediately(self, single_node):
        result = train(single_node, small_config(iterations=2))
        assert result.converged_at == 0
        assert [row["terminal_tv"] for row in result.log] == [0.0, 0.0]
        assert np.isfinite(result.tables.Y).all()

    def test_log_rows(self, chain):
        stream = StringIO()
        result = train(
            chain.with_changes(K=8),
            small_config(),
            log_stream=JSONLinesOutputStream(stream),
        )
        lines = [json.loads(line) for line in stream.getvalue().splitlines()]
        assert [row["iter"] for row in lines] == [0, 1, 2]
        assert set(lines[0]) == {
            "iter",
            "ipf_f",
            "ipf_b",
            "td_f",
            "td_b",
            "total",
            "clamp_count",
            "sat_count",
            "wallclock",
            "lambda_td",
            "learning_rate",
            "grad_norm_Y",
            "grad_norm_Yhat",
            "terminal_tv",
        }
        wallclock = [row["wallclock"] for row in lines]
        assert wallclock[0] >= 0
        assert wallclock == sorted(wallclock)
        assert len(result.log) == 3
        assert result.hjb_residual >= 0

    def test_terminal_rows_are_pinned(self, chain):
        result = train(chain.with_changes(K=8), small_config(iterations=1))
        K = result.tables.K
        # backward rollouts all start on the single target node
        assert np.allclose(
            np.exp(result.tables.Y[K] + result.tables.Yhat[K]), chain.nu, atol=1e-9
        )

    def test_deterministic(self, chain):
        instance = chain.with_changes(K=8)
        first = train(instance, small_config(rollouts=600), workers=1)
        second = train(instance, small_config(rollouts=600), workers=3)
        assert first.tables == second.tables
        assert without_wallclock(first.log) == without_wallclock(second.log)

    def test_resume_is_bit_identical(self, chain, tmp_path):
        instance = chain.with_changes(K=8)
        config = small_config(iterations=4, checkpoint_every=2)
        straight = train(instance, config, checkpoint_dir=tmp_path / "a")
        assert [path.name for path in straight.checkpoints] == [
            checkpoint_name(2),
            checkpoint_name(4),
        ]
        resumed = train(
            instance,
            config,
            checkpoint_dir=tmp_path / "b",
            resume=load_checkpoint(tmp_path / "a" / checkpoint_name(2)),
        )
        assert np.array_equal(resumed.tables.Y, straight.tables.Y)
        assert np.array_equal(resumed.tables.Yhat, straight.tables.Yhat)
        assert [row["iter"] for row in resumed.log] == [2, 3]

    def test_resume_needs_matching_tables(self, chain, tmp_path):
        config = small_config(iterations=2, checkpoint_every=1)
        train(chain.with_changes(K=8), config, checkpoint_dir=tmp_path)
        checkpoint = load_checkpoint(tmp_path / checkpoint_name(1))
        with pytest.raises(BridgeValidationError, match="K=8"):
            train(chain.with_changes(K=6), config, resume=checkpoint)

    def test_unreachable_target_warns(self, chain):
        with pytest.warns(UserWarning, match="cannot be reached"):
            train(chain.with_changes(K=1), small_config(iterations=1))

    def test_clamping_warns(self):
        instance = load_fixture("three_node_chain", K=4, rate=100.0)
        with pytest.warns(UserWarning, match="clamped"):
            train(instance, small_config(iterations=1))

    def test_divergence_writes_a_diagnostic_checkpoint(
        self, chain, tmp_path, monkeypatch
    ):
        def diverge(selector, batch, tables, generator, f_values=None):
            zeros = TableGradients(
                Y=np.zeros_like(tables.Y), Yhat=np.zeros_like(tables.Yhat)
            )
            return float("nan"), zeros

        monkeypatch.setattr(trainer_module, "loss_and_gradients", diverge)
        with pytest.raises(BridgeNumericalError, match="Non-finite"):
            train(chain.with_changes(K=8), small_config(), checkpoint_dir=tmp_path)
        assert load_checkpoint(tmp_path / DIAGNOSTIC_CHECKPOINT).iteration == 0


class TestEvaluate:
    def test_evaluate(self, chain):
        instance = chain.with_changes(K=8)
        result = train(instance, small_config())
        report, plots, batch = evaluate(instance, result.tables, rollouts=100, seed=5)
        assert report.method == "gsb"
        assert report.batch_size == 100
        assert batch.seed == 5
        assert "occupancy" in plots


@pytest.mark.slow
def test_training_beats_the_reference_dynamics(chain):
    from graphbridge.baselines import uncontrolled_policy
    from graphbridge.ctmc_engine import propagate_marginals
    from graphbridge.metrics import total_variation

    instance = chain.with_changes(K=16)
    result = train(
        instance, small_config(iterations=30, rollouts=2000, inner_steps=10)
    )
    report, _, _ = evaluate(instance, result.tables, rollouts=5000)
    reference = propagate_marginals(
        uncontrolled_policy(instance.generator), instance.mu, instance.K
    )[-1]
    assert report.terminal_tv < total_variation(reference, instance.nu)
