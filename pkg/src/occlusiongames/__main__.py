#!/usr/bin/env python3
# flake8: noqa: T201

import logging
import sys
import traceback as tb
from functools import update_wrapper
from pathlib import Path
from typing import Optional

import click

import occlusiongames
from .context import Context, RunManifest
from .errors import ConfigError, GameError
from .utils import config_hash

logging.basicConfig(level=logging.INFO)

#: Result converged, simulation completed
EXIT_OK = 0
#: Usage, configuration or runtime error
EXIT_ERROR = 1
#: Quality failure (non-convergence, too many failed samples)
EXIT_QUALITY = 2

FORMATS = ("csv", "json")


class Config:
    def __init__(self, context: Context):
        self.context = context
        self.traceback = False
        self.debug = False


def pass_cfg(f):
    """Pass configuration information; errors exit with code 1"""

    @click.pass_context
    def new_func(ctx, *args, **kwargs):
        try:
            return ctx.invoke(f, ctx.obj, *args, **kwargs)
        except (GameError, OSError) as e:
            if ctx.obj.traceback:
                tb.print_exc()
            if isinstance(e, ConfigError):
                logging.error("Invalid configuration %s", e.path or "")
                for problem in e.problems:
                    logging.error("  %s", problem)
            else:
                logging.error("%s", e)
            sys.exit(EXIT_ERROR)

    return update_wrapper(new_func, f)


def _load(path: Path, expected: type, seed: Optional[int] = None):
    from .config import load_config

    config = load_config(path, seed)
    if not isinstance(config, expected):
        raise ConfigError(["kind: this command needs another kind of file"], path)
    return config


def _manifest(command: str, path: Path, seeds=()) -> RunManifest:
    import yaml

    return RunManifest(
        command,
        config_hash=config_hash(yaml.safe_load(Path(path).read_text())),
        seeds=[seed for seed in seeds if seed is not None],
    )


def _finish(manifest: RunManifest, path: Path, status: int):
    manifest.timings.setdefault("exit_code", status)
    manifest.write(path)
    sys.exit(status)


# --- Create the argument parser


@click.group()
@click.option("--quiet", is_flag=True, help="Be quiet")
@click.option("--debug", is_flag=True, help="Be even more verbose (implies traceback)")
@click.option(
    "--traceback", is_flag=True, help="Display traceback if an exception occurs"
)
@click.option(
    "--output-dir",
    type=Path,
    default=None,
    help="Directory for results (default: $OCCLUSIONGAMES_OUTPUT_DIR)",
)
@click.pass_context
def cli(ctx, quiet, debug, traceback, output_dir):
    if quiet:
        logging.getLogger().setLevel(logging.WARN)
    elif debug:
        logging.getLogger().setLevel(logging.DEBUG)

    context = Context(output_dir)
    context.traceback = traceback or debug

    ctx.obj = Config(context)
    ctx.obj.traceback = traceback or debug
    ctx.obj.debug = debug


def main():
    cli(obj=None)


@cli.command(help="Get version")
def version():
    print(occlusiongames.__version__)


@cli.command(help="Checks a configuration file")
@click.option("--config", type=Path, required=True, help="Configuration file")
@pass_cfg
def validate(cfg: Config, config: Path):
    from .config import load_config

    loaded = load_config(config)
    print(f"{config}: valid {type(loaded).__name__}")


@cli.command(help="Solves a game (Nash equilibrium or contingency game)")
@click.option("--config", type=Path, required=True, help="Game configuration")
@click.option("--seed", type=int, default=None, help="Scenario seed")
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="json")
@pass_cfg
def solve(cfg: Config, config: Path, seed: Optional[int], fmt: str):
    from .config import SolveConfig
    from .contingency import solve_contingency
    from .formats import write_json, write_trajectories
    from .nash import solve_olne

    loaded = _load(config, SolveConfig, seed)
    manifest = _manifest("solve", config, [seed])
    output = cfg.context.output_dir
    stem = config.stem
    game = loaded.world.game

    if loaded.contingency is not None:
        result = solve_contingency(loaded.contingency.spec(game), loaded.solver)
        # One table per hypothesis
        tables = {
            tag: dict(zip(result.agent_ids[tag], result.trajectories[tag]))
            for tag in result.trajectories
        }
    else:
        result = solve_olne(game, loaded.solver)
        tables = {"": result.as_mapping()}

    manifest.add_output(write_json(output / f"{stem}.result.json", result))
    if fmt == "csv":
        for tag, trajectories in tables.items():
            name = ".".join(part for part in (stem, tag, "trajectories.csv") if part)
            manifest.add_output(write_trajectories(output / name, trajectories))

    if not result.converged:
        logging.error(
            "The solver did not converge (residual %.3e after %d iterations)",
            result.kkt_residual_norm,
            result.iterations,
        )
    _finish(
        manifest,
        output / f"{stem}.solve.manifest.json",
        EXIT_OK if result.converged else EXIT_QUALITY,
    )


@cli.command(help="Estimates a game from observations")
@click.option("--config", type=Path, required=True, help="Estimation configuration")
@click.option(
    "--observations", type=Path, required=True, help="Observations (CSV file)"
)
@click.option("--ignorant", is_flag=True, help="Ignore the unobserved agents")
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="json")
@pass_cfg
def estimate(cfg: Config, config: Path, observations: Path, ignorant: bool, fmt: str):
    from .config import EstimateConfig
    from .formats import read_observations, write_json, write_trajectories
    from .inverse import estimate_game, estimate_game_ignorant

    loaded = _load(config, EstimateConfig)
    sequence = read_observations(observations, loaded.template.agent_ids)
    manifest = _manifest("estimate", config, [sequence.seed])
    output = cfg.context.output_dir
    stem = observations.stem

    estimator = estimate_game_ignorant if ignorant else estimate_game
    result = estimator(
        sequence,
        loaded.template,
        loaded.estimator,
        known_weights=loaded.known_weights,
        solver_config=loaded.solver,
    )

    manifest.add_output(write_json(output / f"{stem}.estimate.json", result))
    if fmt == "csv":
        manifest.add_output(
            write_trajectories(
                output / f"{stem}.estimate.csv",
                result.trajectories,
                {"start": result.start},
            )
        )
    if not result.converged:
        logging.error(
            "The estimator did not converge (KKT violation %.3e)",
            result.kkt_constraint_violation,
        )
    _finish(
        manifest,
        output / f"{stem}.estimate.manifest.json",
        EXIT_OK if result.converged else EXIT_QUALITY,
    )


@cli.command(help="Runs a receding-horizon estimation and planning simulation")
@click.option("--config", type=Path, required=True, help="Pipeline configuration")
@click.option("--seed", type=int, default=None, help="Scenario and noise seed")
@click.option("--ignorant", is_flag=True, help="Use the occlusion-ignorant ego")
@pass_cfg
def pipeline(cfg: Config, config: Path, seed: Optional[int], ignorant: bool):
    from .config import PipelineRun
    from .formats import write_ndjson
    from .pipeline import run_pipeline, run_pipeline_ignorant, run_planning_simulation

    loaded = _load(config, PipelineRun, seed)
    mode = loaded.mode
    if ignorant:
        mode = "planning-ignorant" if mode.startswith("planning") else "ignorant"
    manifest = _manifest("pipeline", config, [loaded.config.seed])
    output = cfg.context.output_dir

    if mode == "aware":
        trace = run_pipeline(loaded.world, loaded.config)
    elif mode == "ignorant":
        trace = run_pipeline_ignorant(loaded.world, loaded.config)
    else:
        trace = run_planning_simulation(
            loaded.world, loaded.config, aware=mode == "planning-aware"
        )

    manifest.add_output(
        write_ndjson(
            output / f"{config.stem}.{mode}.trace.ndjson",
            trace.header(),
            trace.step_dicts(),
        )
    )
    manifest.timings["steps"] = trace.timings()
    if not trace.completed:
        logging.error("The simulation stopped: %s", trace.failure.message)
    _finish(
        manifest,
        output / f"{config.stem}.{mode}.pipeline.manifest.json",
        EXIT_OK if trace.completed else EXIT_QUALITY,
    )


@cli.command(help="Runs a Monte Carlo study")
@click.option("--config", type=Path, required=True, help="Experiment configuration")
@click.option("--seed", type=int, default=None, help="First seed of the samples")
@click.option("--workers", type=int, default=None, help="Number of processes")
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="csv")
@pass_cfg
def experiment(
    cfg: Config, config: Path, seed: Optional[int], workers: Optional[int], fmt: str
):
    from .experiments import ExperimentConfig, run_experiment, write_outcome

    loaded = _load(config, ExperimentConfig, seed)
    manifest = _manifest("experiment", config, [loaded.base_seed])
    directory = cfg.context.output_dir / config.stem

    outcome = run_experiment(
        loaded,
        workers or cfg.context.workers,
        progress=logging.getLogger().isEnabledFor(logging.INFO),
    )
    write_outcome(outcome, directory, manifest, fmt)
    if not outcome.acceptable:
        logging.error(
            "%d of %d samples failed", outcome.failures, len(outcome.records)
        )
    _finish(
        manifest,
        directory / "experiment.manifest.json",
        EXIT_OK if outcome.acceptable else EXIT_QUALITY,
    )


if __name__ == "__main__":
    main()
