import numpy as np
import pytest

from graphbridge.costs import (
    RunningCostSpec,
    cost_table,
    eval_cost,
    free_energy_table,
)
from graphbridge.exceptions import BridgeValidationError


class TestRunningCostSpec:
    def test_zero(self):
        spec = RunningCostSpec.zero()
        assert spec.is_zero
        assert cost_table(spec, np.ones((3, 2))).tolist() == [[0, 0]] * 3

    def test_node_table(self):
        spec = RunningCostSpec.from_table([1.0, 2.0, 3.0])
        assert not spec.is_zero
        table = cost_table(spec, np.zeros((2, 3)))
        assert table.tolist() == [[1, 2, 3], [1, 2, 3]]
        assert eval_cost(spec, 0, 2, None) == 3.0

    def test_congestion_skips_excluded_nodes(self):
        spec = RunningCostSpec.congestion(2.0, exclude=[0], b_scale=10.0)
        p_hat = np.array([[0.5, 0.25, 0.25]])
        assert cost_table(spec, p_hat).tolist() == [[0.0, 5.0, 5.0]]
        assert eval_cost(spec, 0, 0, p_hat[0]) == 0.0
        assert eval_cost(spec, 0, 1, p_hat[0]) == 5.0

    def test_congestion_with_zero_weight_is_zero(self):
        assert RunningCostSpec.congestion(0.0).is_zero

    def test_with_weight(self):
        congestion = RunningCostSpec.congestion(1.0, exclude=[3])
        assert congestion.with_weight(4.0).weight == 4.0
        assert congestion.with_weight(4.0).exclude == (3,)
        table = RunningCostSpec.from_table([1.0, -2.0])
        assert table.with_weight(0.5).node_table == (0.5, -1.0)
        assert RunningCostSpec.zero().with_weight(3.0).is_zero

    def test_frozen(self):
        spec = RunningCostSpec.zero()
        with pytest.raises(Exception):
            spec.weight = 1.0

    @pytest.mark.parametrize(
        "options",
        [
            {"kind": "quadratic"},
            {"kind": "node_table"},
            {"kind": "node_table", "node_table": (1.0, float("nan"))},
            {"kind": "congestion", "weight": -1.0},
            {"kind": "congestion", "weight": 1.0, "b_scale": 0.0},
        ],
    )
    def test_invalid(self, options):
        with pytest.raises(BridgeValidationError):
            RunningCostSpec(**options)

    def test_validate_for(self):
        RunningCostSpec.from_table([1.0, 2.0]).validate_for(2)
        with pytest.raises(BridgeValidationError, match="3 nodes"):
            RunningCostSpec.from_table([1.0, 2.0]).validate_for(3)
        with pytest.raises(BridgeValidationError, match="Excluded node 5"):
            RunningCostSpec.congestion(1.0, exclude=[5]).validate_for(3)


def test_free_energy_table():
    energies = free_energy_table([0.5, 0.5, 0.0])
    assert energies[0] == pytest.approx(np.log(2))
    assert np.isfinite(energies).all()
