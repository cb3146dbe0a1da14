"""AdamW updates for tabular potentials.

The potential tables stay numpy arrays; torch wraps them without copying,
so ``torch.optim.AdamW`` updates the arrays in place. Gradients come from
``graphbridge.objectives`` and are handed over as ``.grad``.
"""
import typing as T

import numpy as np

from graphbridge.exceptions import BridgeNumericalError


class TableOptimizer:
    def __init__(
        self,
        table: np.ndarray,
        learning_rate: float,
        weight_decay: float = 0.0,
        betas: T.Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        import torch

        self._torch = torch
        if not (table.flags.c_contiguous and table.flags.writeable):
            raise ValueError("Potential tables must be writeable C-contiguous arrays")
        self.table = table
        self.parameter = torch.nn.Parameter(torch.from_numpy(table))
        self.optimizer = torch.optim.AdamW(
            [self.parameter],
            lr=learning_rate,
            betas=betas,
            eps=eps,
            weight_decay=weight_decay,
        )

    @property
    def learning_rate(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    @learning_rate.setter
    def learning_rate(self, value: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = float(value)

    def step(self, gradient: np.ndarray) -> None:
        if not np.isfinite(gradient).all():
            raise BridgeNumericalError("Gradient has non-finite entries")
        self.parameter.grad = self._torch.from_numpy(
            np.ascontiguousarray(gradient, dtype=self.table.dtype).copy()
        )
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)

    def state_arrays(self) -> T.Dict[str, np.ndarray]:
        "Adam moments and step count as plain arrays, empty before the first step"
        state = self.optimizer.state.get(self.parameter)
        if not state:
            return {}
        return {
            "step": np.array([float(state["step"])]),
            "exp_avg": state["exp_avg"].detach().numpy().copy(),
            "exp_avg_sq": state["exp_avg_sq"].detach().numpy().copy(),
        }

    def load_state_arrays(self, arrays: T.Mapping[str, np.ndarray]) -> None:
        if not arrays:
            return
        torch = self._torch
        self.optimizer.state[self.parameter] = {
            "step": torch.tensor(float(arrays["step"][0]), dtype=torch.float32),
            "exp_avg": torch.from_numpy(np.array(arrays["exp_avg"], dtype=self.table.dtype)),
            "exp_avg_sq": torch.from_numpy(
                np.array(arrays["exp_avg_sq"], dtype=self.table.dtype)
            ),
        }
