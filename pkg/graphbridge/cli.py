#!/usr/bin/env python3
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import click

from graphbridge import version
from graphbridge.api import (
    GraphBridgeApplication,
    describe_instance,
    export_rollouts,
    run_assignment,
    run_baseline,
    run_evaluation,
    run_lambda_sweep,
    run_oracle,
    run_training,
)
from graphbridge.exceptions import GraphBridgeError

if __name__ == "__main__":  # pragma: no cover
    sys.path.append(str(Path(__file__).parent.parent))

WORKERS_ENVVAR = "GRAPHBRIDGE_WORKERS"


class GraphBridgeClickException(click.ClickException):
    "Carries the exit code of the library error it wraps"

    def __init__(self, error: GraphBridgeError):
        super().__init__(str(error))
        self.exit_code = error.exit_code


class VersionMessage:
    "Class that formats itself as a version message when % interpolated"

    def quick_test(self) -> str:
        from graphbridge.ctmc_engine import propagate_marginals
        from graphbridge.fixtures import load_fixture

        instance = load_fixture("three_node_chain")
        marginals = propagate_marginals(instance.generator, instance.mu, instance.K)
        return (
            "Properly installed"
            if abs(marginals[-1].sum() - 1.0) < 1e-9
            else "Unknown installation error"
        )

    def __mod__(self, vals) -> str:
        return "\n".join(
            (
                f"graphbridge version {version}",
                "",
                f"Program: {__file__}",
                f"Python: {sys.version}",
                f"Executable: {sys.executable}",
                f"Installation: {self.quick_test()}",
            )
        )


def float_list(ctx, param, value=None):
    "Parse '0,0.1,0.2' into a list of floats"
    if value is None:
        return None
    try:
        return [float(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(
            "This parameter must be a comma-separated list of numbers, like '0,0.1,0.2'"
        )


@contextmanager
def reporting_errors(ctx: click.Context):
    try:
        yield
    except GraphBridgeError as e:
        if ctx.obj.get("debug_internals"):
            raise e
        click.echo("", err=True)
        click.echo(e.prefix, err=True)
        raise GraphBridgeClickException(e) from e


config_option = click.option(
    "--config",
    "config",
    required=True,
    type=click.Path(dir_okay=False),
    help="Run configuration (YAML or JSON)",
)
seed_option = click.option("--seed", type=int, default=None, help="Override the seed")
workers_option = click.option(
    "--workers",
    type=click.IntRange(min=1),
    default=1,
    envvar=WORKERS_ENVVAR,
    show_envvar=True,
    help="Rollout worker threads; results do not depend on it",
)
out_dir_option = click.option(
    "--out-dir",
    "out_dir",
    type=click.Path(file_okay=False),
    default="graphbridge-run",
    show_default=True,
    help="Run directory for every artifact",
)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log progress to stderr")
@click.option(
    "--debug-internals/--no-debug-internals", "debug_internals", default=False
)
@click.version_option(version=version, prog_name="graphbridge", message=VersionMessage())
@click.pass_context
def main_group(ctx, verbose=False, debug_internals=False):
    """
        Schrodinger bridges with running costs on graphs

    \b
        Typical runs:
            * graphbridge train --config run.yml --out-dir runs/a
            * graphbridge baseline --config run.yml --method w1flow
            * graphbridge assign --n 8 --seed 3
    """
    ctx.ensure_object(dict)
    ctx.obj["debug_internals"] = debug_internals
    ctx.obj["application"] = GraphBridgeApplication()
    if verbose:
        logging.basicConfig(
            level=logging.INFO,
            stream=sys.stderr,
            format="%(levelname)s %(name)s: %(message)s",
        )


@main_group.command()
@config_option
@seed_option
@workers_option
@out_dir_option
@click.pass_context
def train(ctx, config, seed=None, workers=1, out_dir=None):
    "Train potentials, then evaluate them on fresh rollouts"
    with reporting_errors(ctx):
        run_training(
            config,
            out_dir=out_dir,
            seed=seed,
            workers=workers,
            parent_application=ctx.obj["application"],
        )


@main_group.command(name="eval")
@config_option
@click.option(
    "--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False)
)
@seed_option
@workers_option
@out_dir_option
@click.pass_context
def evaluate(ctx, config, checkpoint, seed=None, workers=1, out_dir=None):
    "Score the potentials in a checkpoint"
    with reporting_errors(ctx):
        run_evaluation(
            config,
            checkpoint,
            out_dir=out_dir,
            seed=seed,
            workers=workers,
            parent_application=ctx.obj["application"],
        )


@main_group.command()
@config_option
@click.option(
    "--method",
    required=True,
    help="uncontrolled, attraction, w1flow or doob",
)
@seed_option
@workers_option
@out_dir_option
@click.pass_context
def baseline(ctx, config, method, seed=None, workers=1, out_dir=None):
    "Roll out and score a comparison policy"
    with reporting_errors(ctx):
        run_baseline(
            config,
            method,
            out_dir=out_dir,
            seed=seed,
            workers=workers,
            parent_application=ctx.obj["application"],
        )


@main_group.command()
@click.option("--n", "n", required=True, type=click.IntRange(min=1), help="Problem size")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--K", "K", type=click.IntRange(min=1), default=8, show_default=True)
@click.option(
    "--config",
    "config",
    type=click.Path(dir_okay=False),
    default=None,
    help="Config whose train and eval blocks are used",
)
@workers_option
@out_dir_option
@click.pass_context
def assign(ctx, n, seed=0, K=8, config=None, workers=1, out_dir=None):
    "Solve a random assignment problem and compare with the LP optimum"
    application = ctx.obj["application"]
    with reporting_errors(ctx):
        result = run_assignment(
            n,
            out_dir=out_dir,
            seed=seed,
            K=K,
            config=config,
            workers=workers,
            parent_application=application,
        )
    application.echo(json.dumps(result.metrics, sort_keys=True, indent=2))


@main_group.command(name="sweep-lambda")
@config_option
@click.option(
    "--values",
    required=True,
    callback=float_list,
    help="Comma-separated lambda_td values, like '0,0.1,0.2,0.5'",
)
@click.option("--seeds", type=click.IntRange(min=1), default=1, show_default=True)
@seed_option
@workers_option
@out_dir_option
@click.pass_context
def sweep_lambda(ctx, config, values, seeds=1, seed=None, workers=1, out_dir=None):
    "Train once per lambda_td value and write the ablation table"
    with reporting_errors(ctx):
        run_lambda_sweep(
            config,
            values,
            out_dir=out_dir,
            seeds=seeds,
            seed=seed,
            workers=workers,
            parent_application=ctx.obj["application"],
        )


@main_group.command()
@config_option
@click.option(
    "--kind",
    type=click.Choice(["bridge", "transport", "committor"]),
    default="bridge",
    show_default=True,
)
@out_dir_option
@click.pass_context
def oracle(ctx, config, kind="bridge", out_dir=None):
    "Exact reference solution for a small instance"
    with reporting_errors(ctx):
        run_oracle(
            config, kind, out_dir=out_dir, parent_application=ctx.obj["application"]
        )


@main_group.command(name="rollout-export")
@config_option
@click.option(
    "--checkpoint",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Potentials to roll out; the reference dynamics when omitted",
)
@click.option("--rollouts", type=click.IntRange(min=1), default=None)
@click.option("--csv/--no-csv", "csv", default=True, show_default=True)
@seed_option
@workers_option
@out_dir_option
@click.pass_context
def rollout_export(
    ctx, config, checkpoint=None, rollouts=None, csv=True, seed=None, workers=1, out_dir=None
):
    "Write trajectories as a binary trace and optionally as CSV"
    with reporting_errors(ctx):
        export_rollouts(
            config,
            out_dir=out_dir,
            checkpoint=checkpoint,
            rollouts=rollouts,
            seed=seed,
            workers=workers,
            csv=csv,
            parent_application=ctx.obj["application"],
        )


@main_group.command()
@click.argument("source", required=False, type=click.Path(dir_okay=False))
@click.option("--fixture", default=None, help="Describe a bundled fixture instead")
@click.pass_context
def describe(ctx, source=None, fixture=None):
    "Statistics of a DIMACS file, an instance file, a run config or a fixture"
    application = ctx.obj["application"]
    with reporting_errors(ctx):
        stats = describe_instance(source, fixture=fixture)
    application.echo(json.dumps(stats, sort_keys=True, indent=2))


def main():
    main_group.main(prog_name="graphbridge")


if __name__ == "__main__":  # pragma: no cover
    main()
