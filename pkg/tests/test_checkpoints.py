import numpy as np
import pytest

from graphbridge.checkpoints import MAGIC, load_checkpoint, save_checkpoint
from graphbridge.exceptions import BridgeParseError
from graphbridge.potentials import PotentialTable


@pytest.fixture
def tables(rng):
    return PotentialTable(4, 3, Y=rng.normal(size=(5, 3)), Yhat=rng.normal(size=(5, 3)))


class TestCheckpoints:
    def test_tables_and_state_survive(self, tmp_path, tables, rng):
        state = {"Y": {"step": np.array([3.0]), "exp_avg": rng.normal(size=(5, 3))}}
        path = save_checkpoint(
            tmp_path / "a.ckpt", tables, 7, state, extra={"instance": "chain"}
        )
        loaded = load_checkpoint(path)
        assert loaded.tables == tables
        assert loaded.iteration == 7
        assert loaded.header["instance"] == "chain"
        assert loaded.header["dt"] == 0.25
        assert np.array_equal(loaded.optimizer_state["Y"]["exp_avg"], state["Y"]["exp_avg"])
        assert loaded.optimizer_state["Y"]["step"].tolist() == [3.0]

    def test_file_starts_with_magic(self, tmp_path, tables):
        path = save_checkpoint(tmp_path / "a.ckpt", tables, 0)
        assert path.read_bytes().startswith(MAGIC)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"hello")
        with pytest.raises(BridgeParseError, match="Not a graphbridge checkpoint"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path, tables):
        path = save_checkpoint(tmp_path / "a.ckpt", tables, 0)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(BridgeParseError, match="Corrupt"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path, tables):
        path = save_checkpoint(tmp_path / "a.ckpt", tables, 0)
        path.write_bytes(path.read_bytes() + b"\0" * 8)
        with pytest.raises(BridgeParseError, match="trailing"):
            load_checkpoint(path)
