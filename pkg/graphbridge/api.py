from pathlib import Path
from contextlib import ExitStack
from dataclasses import dataclass, field
from logging import getLogger
import typing as T

import numpy as np

from graphbridge.assignment import (
    assignment_metrics,
    decode_plan,
    encode_assignment,
    random_assignment_instance,
)
from graphbridge.baselines import BASELINES, KernelPolicy, build_baseline
from graphbridge.checkpoints import load_checkpoint, save_checkpoint
from graphbridge.ctmc_engine import FORWARD, EdgeRatePolicy, path_kl, rollout
from graphbridge.dimacs import load_dimacs_mcf
from graphbridge.exact_oracle import committor, solve_bridge_exact, solve_transport_lp
from graphbridge.exceptions import (
    AbsoluteContinuityError,
    BridgeUsageError,
    BridgeValidationError,
)
from graphbridge.graph_core import ProblemInstance
from graphbridge.metrics import evaluate_batch
from graphbridge.output_streams import (
    CSVOutputStream,
    JSONLinesOutputStream,
    trace_rows,
    write_json,
    write_trace,
)
from graphbridge.potentials import PotentialTable
from graphbridge.run_config import (
    EvalConfig,
    RunConfig,
    TrainConfig,
    load_blocks,
    load_instance_file,
    load_run_config,
    load_yaml,
)
from graphbridge.trainer import TrainingResult, Trainer, evaluate
from graphbridge.utils.files import FileLike, ensure_folder

logger = getLogger(__name__)

ORACLES = ("bridge", "transport", "committor")
INSTANCE_SUFFIXES = (".yml", ".yaml", ".json")


class GraphBridgeApplication:
    """Base class for all applications which embed graphbridge as a library,
    including the graphbridge CLI"""

    def echo(self, message=None, file=None, nl=True, err=False, color=None):
        """Write something to a virtual stdout or stderr.

        Arguments to this function are derived from click.echo"""
        import click

        click.echo(message, file, nl, err, color)


class RunDirectory:
    """A self-describing output folder.

    Every artifact written through it is listed in ``manifest.json`` with
    the tool version and the command that produced it.
    """

    def __init__(self, out_dir: FileLike, command: str, application: GraphBridgeApplication):
        self.path = ensure_folder(out_dir)
        self.command = command
        self.application = application
        self.artifacts: T.List[str] = []

    def file(self, name: str) -> Path:
        path = self.path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        if name not in self.artifacts:
            self.artifacts.append(name)
        return path

    def report(self, messages: T.Optional[T.Sequence[str]]):
        for message in messages or ():
            self.application.echo(message)

    def write_json(self, name: str, obj) -> None:
        self.report([write_json(self.file(name), obj)])

    def csv_stream(self) -> CSVOutputStream:
        return CSVOutputStream(self.path)

    def close_csv(self, stream: CSVOutputStream) -> None:
        for table in stream.writers:
            self.file(f"{table}.csv")
        self.report(stream.close())

    def finish(self, config: T.Any = None) -> None:
        from graphbridge import version

        if config is not None:
            self.write_json("config.json", config)
        write_json(
            self.path / "manifest.json",
            {
                "tool": "graphbridge",
                "version": version,
                "command": self.command,
                "artifacts": sorted(self.artifacts),
            },
        )


@dataclass
class RunResult:
    run_dir: Path
    metrics: T.Dict[str, T.Any] = field(default_factory=dict)
    training: T.Optional[TrainingResult] = None


def _config(config: T.Union[RunConfig, FileLike]) -> RunConfig:
    if isinstance(config, RunConfig):
        return config
    return load_run_config(config)


def _with_seed(config: RunConfig, seed: T.Optional[int]) -> RunConfig:
    if seed is None:
        return config
    return config.copy(update={"train": config.train.copy(update={"seed": seed})})


def _eval_options(instance: ProblemInstance, eval_config: EvalConfig) -> T.Dict[str, T.Any]:
    target_set = eval_config.target_set
    if target_set is None:
        target_set = instance.extras.get("target_set")
    return {
        "top_k": eval_config.top_k,
        "target_set": target_set,
        "energies": instance.extras.get("energies"),
        "mass": eval_config.mass or instance.mass,
        "with_overhead": eval_config.path_overhead,
    }


def _write_plots(run_dir: RunDirectory, plots: T.Mapping[str, T.Sequence[T.Dict]]):
    stream = run_dir.csv_stream()
    for table, rows in sorted(plots.items()):
        stream.write_rows(table, rows)
    run_dir.close_csv(stream)


def _evaluate_tables(
    run_dir: RunDirectory,
    instance: ProblemInstance,
    tables: PotentialTable,
    eval_config: EvalConfig,
    workers: int,
    extra: T.Mapping[str, T.Any] = None,
) -> T.Dict[str, T.Any]:
    report, plots, _ = evaluate(
        instance,
        tables,
        eval_config.rollouts,
        eval_config.seed,
        workers=workers,
        **_eval_options(instance, eval_config),
    )
    report.extras.update(extra or {})
    metrics = report.as_dict()
    run_dir.write_json("metrics.json", metrics)
    _write_plots(run_dir, plots)
    return metrics


def _table_K_check(instance: ProblemInstance, tables: PotentialTable):
    if (tables.K, tables.node_count) != (instance.K, instance.graph.node_count):
        raise BridgeValidationError(
            f"Checkpoint holds K={tables.K}, N={tables.node_count}; the instance "
            f"has K={instance.K}, N={instance.graph.node_count}"
        )


# Entry points shared by the API and the command line ("graphbridge.cli")
def run_training(
    config: T.Union[RunConfig, FileLike],
    *,
    out_dir: FileLike,
    seed: int = None,  # same as --seed
    workers: int = 1,  # same as --workers
    parent_application: GraphBridgeApplication = None,
) -> RunResult:
    application = parent_application or GraphBridgeApplication()
    config = _with_seed(_config(config), seed)
    instance = config.load_instance()
    run_dir = RunDirectory(out_dir, "train", application)
    resume = load_checkpoint(config.train.resume_from) if config.train.resume_from else None

    with ExitStack() as exit_stack:
        log_stream = exit_stack.enter_context(
            JSONLinesOutputStream(run_dir.file("training_log.jsonl"))
        )
        trainer = Trainer(
            instance,
            config.train,
            workers=workers,
            checkpoint_dir=run_dir.path / "checkpoints",
            log_stream=log_stream,
        )
        result = trainer.train(resume)
    for path in result.checkpoints:
        run_dir.file(str(path.relative_to(run_dir.path)))
    final = run_dir.file("checkpoints/final.ckpt")
    save_checkpoint(final, result.tables, config.train.iterations)
    application.echo(f"Created {final}")

    metrics = _evaluate_tables(
        run_dir,
        instance,
        result.tables,
        config.eval,
        workers,
        extra={"hjb_residual": result.hjb_residual, "converged_at": result.converged_at},
    )
    run_dir.finish(config.dict())
    return RunResult(run_dir.path, metrics, result)


def run_evaluation(
    config: T.Union[RunConfig, FileLike],
    checkpoint: FileLike,
    *,
    out_dir: FileLike,
    seed: int = None,  # overrides eval.seed
    workers: int = 1,
    parent_application: GraphBridgeApplication = None,
) -> RunResult:
    application = parent_application or GraphBridgeApplication()
    config = _config(config)
    if seed is not None:
        config = config.copy(update={"eval": config.eval.copy(update={"seed": seed})})
    instance = config.load_instance()
    tables = load_checkpoint(checkpoint).tables
    _table_K_check(instance, tables)
    run_dir = RunDirectory(out_dir, "eval", application)
    metrics = _evaluate_tables(run_dir, instance, tables, config.eval, workers)
    run_dir.finish(config.dict())
    return RunResult(run_dir.path, metrics)


def _policy_rows(policy) -> T.Dict[str, T.List[T.Dict]]:
    if not isinstance(policy, KernelPolicy):
        return {}
    tables = {
        "kernels": [
            {"t": t, "src": src, "dst": dst, "prob": prob}
            for t, src, dst, prob in policy.kernel_rows()
        ]
    }
    transport = policy.info.get("transport")
    if transport is not None:
        graph = policy.graph
        tables["flows"] = [
            {"t": t, "src": int(graph.src[e]), "dst": int(graph.dst[e]), "flow": float(flow)}
            for t, row in enumerate(transport)
            for e, flow in enumerate(row)
            if flow > 0
        ]
    return tables


def _scalar_info(policy) -> T.Dict[str, T.Any]:
    info = getattr(policy, "info", {})
    return {
        key: value
        for key, value in sorted(info.items())
        if isinstance(value, (int, float, bool, str))
    }


def run_baseline(
    config: T.Union[RunConfig, FileLike],
    method: str,
    *,
    out_dir: FileLike,
    seed: int = None,  # overrides eval.seed
    workers: int = 1,
    parent_application: GraphBridgeApplication = None,
) -> RunResult:
    if method not in BASELINES:
        raise BridgeUsageError(
            f"Unknown baseline {method!r}; choose from {', '.join(BASELINES)}"
        )
    application = parent_application or GraphBridgeApplication()
    config = _config(config)
    eval_config = config.eval
    if seed is not None:
        eval_config = eval_config.copy(update={"seed": seed})
    instance = config.load_instance()
    options = _eval_options(instance, eval_config)
    policy = build_baseline(method, instance, options["target_set"], options["mass"])
    batch = rollout(
        policy,
        instance.mu,
        eval_config.rollouts,
        instance.K,
        seed=eval_config.seed,
        workers=workers,
        direction=FORWARD,
    )
    report, plots = evaluate_batch(batch, instance, method=method, **options)
    report.extras.update(_scalar_info(policy))
    try:
        report.extras["path_kl"] = path_kl(
            policy, instance.generator, instance.mu, instance.K
        )
    except AbsoluteContinuityError as e:
        logger.info("No path KL for %s: %s", method, e)
        report.extras["path_kl"] = None

    run_dir = RunDirectory(out_dir, f"baseline {method}", application)
    metrics = report.as_dict()
    run_dir.write_json("metrics.json", metrics)
    _write_plots(run_dir, {**plots, **_policy_rows(policy)})
    run_dir.finish(config.dict())
    return RunResult(run_dir.path, metrics)


def run_assignment(
    n: int,
    *,
    out_dir: FileLike,
    seed: int = 0,
    K: int = 8,
    config: FileLike = None,  # train and eval blocks only
    workers: int = 1,
    parent_application: GraphBridgeApplication = None,
) -> RunResult:
    """Random n x n transport problem, solved by training and decoded into a plan"""
    application = parent_application or GraphBridgeApplication()
    train_config, eval_config = load_blocks(config) if config else (TrainConfig(), EvalConfig())
    train_config = train_config.copy(update={"seed": seed})
    C, p0, p1 = random_assignment_instance(n, seed)
    instance = encode_assignment(C, p0, p1, K=K, seed=seed)
    run_dir = RunDirectory(out_dir, "assign", application)

    with ExitStack() as exit_stack:
        log_stream = exit_stack.enter_context(
            JSONLinesOutputStream(run_dir.file("training_log.jsonl"))
        )
        result = Trainer(
            instance, train_config, workers=workers, log_stream=log_stream
        ).train()
    _, _, batch = evaluate(
        instance, result.tables, eval_config.rollouts, eval_config.seed, workers=workers
    )
    plan = decode_plan(batch, instance)
    optimal = solve_transport_lp(C, p0, p1)
    metrics = assignment_metrics(plan.plan, optimal.plan, C, p0, p1).as_dict()
    metrics["seed"] = seed
    run_dir.write_json("assignment.json", metrics)
    _write_plots(
        run_dir,
        {
            "plan": [
                {"row": i, "col": j, "value": float(plan.plan[i, j])}
                for i in range(n)
                for j in range(n)
            ]
        },
    )
    run_dir.finish(
        {"n": n, "seed": seed, "K": K, "train": train_config.dict(), "eval": eval_config.dict()}
    )
    return RunResult(run_dir.path, metrics, result)


def run_lambda_sweep(
    config: T.Union[RunConfig, FileLike],
    values: T.Iterable[float],
    *,
    out_dir: FileLike,
    seeds: int = 1,
    seed: int = None,
    workers: int = 1,
    parent_application: GraphBridgeApplication = None,
) -> RunResult:
    """Train and evaluate once per lambda_td value and seed.

    Each ablation row holds the medians over ``seeds`` consecutive seeds.
    """
    application = parent_application or GraphBridgeApplication()
    config = _with_seed(_config(config), seed)
    values = sorted(set(float(v) for v in values))
    if not values:
        raise BridgeUsageError("Give at least one lambda_td value")
    if any(v < 0 for v in values):
        raise BridgeUsageError("lambda_td values must be nonnegative")
    instance = config.load_instance()
    options = _eval_options(instance, config.eval)
    rows = []
    for lambda_td in values:
        reports = []
        for offset in range(seeds):
            train_config = config.train.copy(
                update={"lambda_td": lambda_td, "seed": config.train.seed + offset}
            )
            result = Trainer(instance, train_config, workers=workers).train()
            report, _, _ = evaluate(
                instance,
                result.tables,
                config.eval.rollouts,
                config.eval.seed + offset,
                workers=workers,
                **options,
            )
            reports.append(report)
            logger.info(
                "lambda_td %g, seed %d: terminal TV %.4f, peak occupancy %d",
                lambda_td,
                train_config.seed,
                report.terminal_tv,
                report.peak_occupancy,
            )
        row = {
            "lambda_td": lambda_td,
            "seeds": seeds,
            "terminal_tv": float(np.median([r.terminal_tv for r in reports])),
            "peak_occupancy": float(np.median([r.peak_occupancy for r in reports])),
            "mean_top_k": float(np.median([r.mean_top_k for r in reports])),
        }
        if reports[0].v_max is not None:
            row["v_max"] = float(np.median([r.v_max for r in reports]))
        rows.append(row)

    run_dir = RunDirectory(out_dir, "sweep-lambda", application)
    _write_plots(run_dir, {"ablation": rows})
    run_dir.write_json("ablation.json", rows)
    run_dir.finish(config.dict())
    return RunResult(run_dir.path, {"ablation": rows})


def _basins(instance: ProblemInstance) -> T.Tuple[T.List[int], T.List[int]]:
    extras = instance.extras
    if "unfolded" in extras and "folded" in extras:
        return list(extras["unfolded"]), list(extras["folded"])
    folded = np.flatnonzero(instance.nu > 0)
    unfolded = np.setdiff1d(np.flatnonzero(instance.mu > 0), folded)
    return unfolded.tolist(), folded.tolist()


def run_oracle(
    config: T.Union[RunConfig, FileLike],
    kind: str = "bridge",
    *,
    out_dir: FileLike,
    parent_application: GraphBridgeApplication = None,
) -> RunResult:
    """Exact reference solutions for small instances.

    ``bridge`` solves the zero-cost bridge, ``transport`` the transport LP
    of an assignment instance and ``committor`` the forward committor.
    """
    if kind not in ORACLES:
        raise BridgeUsageError(f"Unknown oracle {kind!r}; choose from {', '.join(ORACLES)}")
    application = parent_application or GraphBridgeApplication()
    config = _config(config)
    instance = config.load_instance()
    graph = instance.graph
    run_dir = RunDirectory(out_dir, f"oracle {kind}", application)
    tables: T.Dict[str, T.List[T.Dict]] = {}

    if kind == "bridge":
        solution = solve_bridge_exact(instance.generator, instance.mu, instance.nu, instance.K)
        metrics = {
            "iterations": solution.iterations,
            "residual": solution.residual,
            "path_kl": path_kl(
                EdgeRatePolicy(graph, solution.rates),
                instance.generator,
                instance.mu,
                instance.K,
            ),
        }
        tables["rates"] = [
            {"t": t, "src": int(graph.src[e]), "dst": int(graph.dst[e]), "rate": float(rate)}
            for t, row in enumerate(solution.rates)
            for e, rate in enumerate(row)
        ]
        tables["marginals"] = [
            {"t": t, "node": x, "prob": float(p)}
            for t, row in enumerate(solution.marginals())
            for x, p in enumerate(row)
        ]
        save_checkpoint(
            run_dir.file("bridge.ckpt"), solution.potential_table(), iteration=0
        )
    elif kind == "transport":
        problem = instance.extras.get("assignment")
        if problem is None:
            raise BridgeUsageError("The transport oracle needs an assignment instance")
        plan = solve_transport_lp(problem.C, problem.p0, problem.p1)
        metrics = {"n": problem.n, "optimal_cost": plan.cost}
        tables["plan"] = [
            {"row": i, "col": j, "value": float(plan.plan[i, j])}
            for i in range(problem.n)
            for j in range(problem.n)
        ]
    else:
        unfolded, folded = _basins(instance)
        q = committor(instance.generator, unfolded, folded)
        metrics = {"unfolded": unfolded, "folded": folded}
        tables["committor"] = [{"node": x, "q": float(value)} for x, value in enumerate(q)]

    run_dir.write_json("oracle.json", metrics)
    _write_plots(run_dir, tables)
    run_dir.finish(config.dict())
    return RunResult(run_dir.path, metrics)


def export_rollouts(
    config: T.Union[RunConfig, FileLike],
    *,
    out_dir: FileLike,
    checkpoint: FileLike = None,  # reference dynamics when missing
    rollouts: int = None,  # defaults to eval.rollouts
    seed: int = None,  # defaults to eval.seed
    workers: int = 1,
    csv: bool = True,
    parent_application: GraphBridgeApplication = None,
) -> RunResult:
    application = parent_application or GraphBridgeApplication()
    config = _config(config)
    instance = config.load_instance()
    if checkpoint:
        tables = load_checkpoint(checkpoint).tables
        _table_K_check(instance, tables)
        policy = tables.forward_policy(instance.generator)
    else:
        policy = EdgeRatePolicy.from_generator(instance.generator)
    batch = rollout(
        policy,
        instance.mu,
        rollouts or config.eval.rollouts,
        instance.K,
        seed=config.eval.seed if seed is None else seed,
        workers=workers,
        direction=FORWARD,
    )
    run_dir = RunDirectory(out_dir, "rollout-export", application)
    run_dir.report([write_trace(run_dir.file("trace.bin"), batch)])
    if csv:
        _write_plots(run_dir, {"trace": list(trace_rows(batch))})
    run_dir.finish(config.dict())
    return RunResult(run_dir.path, {"batch_size": batch.size, "K": batch.K})


def describe_instance(
    source: FileLike = None,
    *,
    fixture: str = None,
) -> T.Dict[str, T.Any]:
    """Statistics of a DIMACS file, an instance file, a run config or a fixture"""
    from graphbridge import fixtures

    if (source is None) == (fixture is None):
        raise BridgeUsageError("Describe either a file or a fixture")
    if source is not None and not Path(source).exists():
        raise BridgeValidationError(f"File not found: {source}")
    if fixture is not None:
        instance = fixtures.load_fixture(fixture)
    elif Path(source).suffix.lower() in INSTANCE_SUFFIXES:
        data = load_yaml(source)
        if isinstance(data, dict) and "nodes" in data:
            instance = load_instance_file(source)
        else:
            instance = load_run_config(source).load_instance()
    else:
        return load_dimacs_mcf(Path(source)).stats.as_dict()

    graph = instance.graph
    out_rates = instance.generator.out_rate(0)
    return {
        "name": instance.name,
        "node_count": graph.node_count,
        "arc_count": graph.edge_count,
        "mean_out_degree": graph.edge_count / graph.node_count,
        "K": instance.K,
        "max_out_rate": float(out_rates.max()) if out_rates.size else 0.0,
        "mu_support": int((instance.mu > 0).sum()),
        "nu_support": int((instance.nu > 0).sum()),
        "unreachable_target_mass": instance.unreachable_target_mass(),
        "cost": instance.cost.kind,
    }
