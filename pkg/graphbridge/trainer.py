"""Alternating forward/backward training of the tabular potentials.

Each iteration rolls out the forward policy (driven by ``Y``) and fits
``Yhat`` to it with the forward IPF and TD losses, then rolls out the
backward policy (driven by ``Yhat``) from nu and fits ``Y`` with the backward
losses. Boundary rows are pinned to the empirical endpoint marginals
before and after every optimizer step.
"""
import math
import time
import typing as T
import warnings
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path

import numpy as np

from graphbridge.checkpoints import Checkpoint, save_checkpoint
from graphbridge.costs import cost_table
from graphbridge.ctmc_engine import BACKWARD, FORWARD, RolloutBatch, rollout
from graphbridge.exact_oracle import hjb_residual
from graphbridge.exceptions import BridgeNumericalError, BridgeValidationError
from graphbridge.graph_core import ProblemInstance
from graphbridge.metrics import MetricsReport, evaluate_batch, total_variation
from graphbridge.objectives import (
    LossReport,
    loss_and_gradients,
    pin_backward_boundary,
    pin_forward_boundary,
)
from graphbridge.optim import TableOptimizer
from graphbridge.output_streams import OutputStream
from graphbridge.potentials import PotentialTable
from graphbridge.run_config import TrainConfig
from graphbridge.utils import rng

logger = getLogger(__name__)

CONVERGED_TV = 0.01
DIAGNOSTIC_CHECKPOINT = "diagnostic.ckpt"


def checkpoint_name(iteration: int) -> str:
    return f"checkpoint-{iteration:05d}.ckpt"


def learning_rate_at(config: TrainConfig, iteration: int) -> float:
    "Linear decay from learning_rate to learning_rate * final_lr_fraction"
    progress = iteration / max(config.iterations - 1, 1)
    return config.learning_rate * (1.0 - (1.0 - config.final_lr_fraction) * progress)


@dataclass
class TrainingResult:
    tables: PotentialTable
    log: T.List[T.Dict[str, T.Any]]
    hjb_residual: float
    converged_at: T.Optional[int]
    checkpoints: T.List[Path] = field(default_factory=list)


class Trainer:
    def __init__(
        self,
        instance: ProblemInstance,
        config: TrainConfig = None,
        *,
        workers: int = 1,
        checkpoint_dir: T.Optional[Path] = None,
        log_stream: T.Optional[OutputStream] = None,
    ):
        self.instance = instance
        self.config = config or TrainConfig()
        self.workers = workers
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.log_stream = log_stream
        self.generator = instance.generator
        self.tables = PotentialTable(instance.K, instance.graph.node_count)
        self.log: T.List[T.Dict[str, T.Any]] = []
        self.checkpoints: T.List[Path] = []
        self.converged_at: T.Optional[int] = None
        self.last_f_values: T.Optional[np.ndarray] = None
        self.last_forward: T.Optional[RolloutBatch] = None
        self.started: T.Optional[float] = None

    def _optimizers(self) -> T.Dict[str, TableOptimizer]:
        config = self.config
        return {
            name: TableOptimizer(
                getattr(self.tables, name),
                config.learning_rate,
                weight_decay=config.weight_decay,
            )
            for name in ("Y", "Yhat")
        }

    def _resume(self, checkpoint: Checkpoint, optimizers) -> int:
        loaded = checkpoint.tables
        if (loaded.K, loaded.node_count) != (self.tables.K, self.tables.node_count):
            raise BridgeValidationError(
                f"Checkpoint holds K={loaded.K}, N={loaded.node_count}; "
                f"the instance needs K={self.tables.K}, N={self.tables.node_count}"
            )
        # in place: the optimizers hold views of these arrays
        self.tables.Y[...] = loaded.Y
        self.tables.Yhat[...] = loaded.Yhat
        for name, optimizer in optimizers.items():
            optimizer.load_state_arrays(checkpoint.optimizer_state.get(name, {}))
        logger.info("Resuming after iteration %d", checkpoint.iteration)
        return checkpoint.iteration

    def _check_reachability(self):
        missing = self.instance.unreachable_target_mass()
        if missing > 0:
            warnings.warn(
                f"nu puts mass {missing:.3g} on nodes that cannot be reached "
                f"from supp(mu) within K={self.instance.K} hops"
            )

    def _warn_on_clamps(self, batch: RolloutBatch, iteration: int):
        entries = batch.K * batch.node_count
        rate = batch.clamp_count / entries if entries else 0.0
        if rate > self.config.clamp_warning_threshold:
            warnings.warn(
                f"Iteration {iteration}: {batch.direction} jump probabilities were "
                f"clamped on {rate:.1%} of (step, node) pairs; consider a larger K"
            )

    def _fit(
        self,
        optimizer: TableOptimizer,
        selectors: T.Tuple[str, str],
        batch: RolloutBatch,
        f_values: np.ndarray,
        pin: T.Callable[[], None],
    ) -> T.Tuple[float, float, float]:
        """Inner optimizer steps on one table.

        Returns the IPF and TD losses and the gradient norm before the
        first step.
        """
        ipf_selector, td_selector = selectors
        lambda_td = self.config.lambda_td
        first = None
        for _ in range(self.config.inner_steps):
            ipf, ipf_grads = loss_and_gradients(
                ipf_selector, batch, self.tables, self.generator, f_values
            )
            td, td_grads = loss_and_gradients(
                td_selector, batch, self.tables, self.generator, f_values
            )
            if not (math.isfinite(ipf) and math.isfinite(td)):
                raise BridgeNumericalError(
                    f"Non-finite loss: {ipf_selector}={ipf}, {td_selector}={td}"
                )
            grads = ipf_grads.Y + ipf_grads.Yhat + lambda_td * (td_grads.Y + td_grads.Yhat)
            if first is None:
                first = (ipf, td, float(np.sqrt((grads**2).sum())))
            optimizer.step(grads)
            pin()
        return first

    def _iteration(self, m: int, optimizers: T.Dict[str, TableOptimizer]):
        config, instance, tables = self.config, self.instance, self.tables
        lr = learning_rate_at(config, m)
        for optimizer in optimizers.values():
            optimizer.learning_rate = lr

        forward = rollout(
            tables.forward_policy(self.generator),
            instance.mu,
            config.rollouts,
            instance.K,
            seed=rng.derive_seed(config.seed, m, rng.FORWARD),
            workers=self.workers,
            direction=FORWARD,
        )
        self._warn_on_clamps(forward, m)
        p_hat = forward.empirical_marginals()
        f_values = cost_table(instance.cost, p_hat)
        pin_forward = lambda: pin_forward_boundary(tables, p_hat[0])  # noqa: E731
        pin_forward()
        ipf_f, td_f, grad_f = self._fit(
            optimizers["Yhat"], ("ipf_fwd", "td_fwd"), forward, f_values, pin_forward
        )

        backward = rollout(
            tables.backward_policy(self.generator),
            instance.nu,
            config.rollouts,
            instance.K,
            seed=rng.derive_seed(config.seed, m, rng.BACKWARD),
            workers=self.workers,
            direction=BACKWARD,
        )
        self._warn_on_clamps(backward, m)
        nu_hat = np.bincount(
            backward.trajectories[:, 0], minlength=backward.node_count
        ) / backward.size
        pin_backward = lambda: pin_backward_boundary(tables, nu_hat)  # noqa: E731
        pin_backward()
        ipf_b, td_b, grad_b = self._fit(
            optimizers["Y"], ("ipf_bwd", "td_bwd"), backward, f_values, pin_backward
        )

        report = LossReport(
            ipf_forward=ipf_f,
            ipf_backward=ipf_b,
            td_forward=td_f,
            td_backward=td_b,
            lambda_td=config.lambda_td,
            gradient_norms={"Yhat": grad_f, "Y": grad_b},
        )
        terminal = total_variation(p_hat[-1], instance.nu)
        if self.converged_at is None and terminal <= CONVERGED_TV:
            self.converged_at = m
        self.last_forward, self.last_f_values = forward, f_values

        values = report.as_dict()
        norms = values.pop("grad_norms")
        row = {
            "iter": m,
            "learning_rate": lr,
            **values,
            **{f"grad_norm_{name}": norm for name, norm in sorted(norms.items())},
            "terminal_tv": terminal,
            "clamp_count": forward.clamp_count + backward.clamp_count,
            "sat_count": forward.saturation_count + backward.saturation_count,
            "wallclock": time.perf_counter() - self.started,
        }
        self.log.append(row)
        if self.log_stream:
            self.log_stream.write_row("training_log", row)
        logger.info(
            "Iteration %d: total loss %.5g, terminal TV %.4f, lr %.3g",
            m,
            report.total,
            terminal,
            lr,
        )

    def _save(self, name: str, iteration: int, optimizers) -> T.Optional[Path]:
        if not self.checkpoint_dir:
            return None
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        path = save_checkpoint(
            self.checkpoint_dir / name,
            self.tables,
            iteration,
            {name: opt.state_arrays() for name, opt in optimizers.items()},
            extra={"instance": self.instance.name, "seed": self.config.seed},
        )
        logger.info("Wrote %s", path)
        return path

    def train(self, resume: T.Optional[Checkpoint] = None) -> TrainingResult:
        config = self.config
        self.started = time.perf_counter()
        self._check_reachability()
        optimizers = self._optimizers()
        start = self._resume(resume, optimizers) if resume is not None else 0
        for m in range(start, config.iterations):
            try:
                self._iteration(m, optimizers)
            except BridgeNumericalError:
                path = self._save(DIAGNOSTIC_CHECKPOINT, m, optimizers)
                if path:
                    logger.error("Training diverged at iteration %d; wrote %s", m, path)
                raise
            done = m + 1
            if config.checkpoint_every and done % config.checkpoint_every == 0:
                self.checkpoints.append(
                    self._save(checkpoint_name(done), done, optimizers)
                )
        self.checkpoints = [path for path in self.checkpoints if path]
        return TrainingResult(
            tables=self.tables.copy(),
            log=self.log,
            hjb_residual=self.final_hjb_residual(),
            converged_at=self.converged_at,
            checkpoints=self.checkpoints,
        )

    def final_hjb_residual(self) -> float:
        "HJB residual of V = -Y over the (k, x) the last forward batch visited"
        if self.last_forward is None:
            return 0.0
        visited = self.last_forward.empirical_marginals() > 0
        return hjb_residual(
            -self.tables.Y, self.generator, self.last_f_values, mask=visited
        )


def train(
    instance: ProblemInstance,
    config: TrainConfig = None,
    *,
    workers: int = 1,
    checkpoint_dir: T.Optional[Path] = None,
    log_stream: T.Optional[OutputStream] = None,
    resume: T.Optional[Checkpoint] = None,
) -> TrainingResult:
    trainer = Trainer(
        instance,
        config,
        workers=workers,
        checkpoint_dir=checkpoint_dir,
        log_stream=log_stream,
    )
    return trainer.train(resume)


def evaluate(
    instance: ProblemInstance,
    tables: PotentialTable,
    rollouts: int = 5000,
    seed: int = 1,
    *,
    workers: int = 1,
    method: str = "gsb",
    top_k: int = 100,
    target_set: T.Iterable[int] = None,
    energies=None,
    mass: float = None,
    with_overhead: bool = False,
) -> T.Tuple[MetricsReport, T.Dict[str, T.Any], RolloutBatch]:
    """Fresh forward rollouts of ``tables`` scored by the full metric suite"""
    batch = rollout(
        tables.forward_policy(instance.generator),
        instance.mu,
        rollouts,
        instance.K,
        seed=seed,
        workers=workers,
        direction=FORWARD,
    )
    report, plots = evaluate_batch(
        batch,
        instance,
        method=method,
        top_k=top_k,
        target_set=target_set,
        energies=energies,
        mass=mass,
        with_overhead=with_overhead,
    )
    return report, plots, batch
