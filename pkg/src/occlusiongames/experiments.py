"""Monte Carlo studies

Each study is a list of independent samples that only share the read-only
configuration; samples run in worker processes and their records are
collected (and written) by the calling process, ordered by sample index.
"""
import concurrent.futures
import itertools
import logging
import traceback
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

import attrs
import numpy as np
from attrs import field, frozen
from tqdm import tqdm

from .context import RunManifest
from .errors import MetricError, SampleError
from .formats import write_json, write_ndjson, write_table, write_trajectories
from .inverse import EstimateResult, estimate_game, estimate_game_ignorant
from .inverse import simulate_observations
from .metrics import MetricReport, Summary, ade, dissimilarities, min_mutual_distance
from .nash import solve_olne
from .pipeline import (
    PipelineConfig,
    SimulationTrace,
    World,
    run_pipeline,
    run_pipeline_ignorant,
    run_planning_simulation,
)
from .scenarios import (
    COLLISION_AVOIDANCE,
    CROSSING_ROAD,
    THREE_AGENT,
    ScenarioConfig,
    build_collision_avoidance_scenario,
    build_crossing_road_scenario,
    build_three_agent_scenario,
)
from .game import Trajectory

ESTIMATION_SWEEP = "estimation-sweep"
PLANNING_SWEEP = "planning-sweep"
CROSSING_ROAD_STUDY = "crossing-road"

EXPERIMENT_KINDS = (ESTIMATION_SWEEP, PLANNING_SWEEP, CROSSING_ROAD_STUDY)

SUMMARY_SCHEMA = "occlusiongames.summary/1"
SUMMARY_COLUMNS = ("metric", "median", "lower", "upper", "q1", "q2", "q3", "count")

#: Scenario used by each study
SCENARIO_OF = {
    ESTIMATION_SWEEP: THREE_AGENT,
    PLANNING_SWEEP: COLLISION_AVOIDANCE,
    CROSSING_ROAD_STUDY: CROSSING_ROAD,
}


def _kind(instance, attribute, value):
    if value not in EXPERIMENT_KINDS:
        raise ValueError(f"unknown experiment kind {value!r}")


def _default_sigmas():
    return tuple(float(s) for s in np.linspace(0.0, 0.07, 11))


@frozen
class ExperimentConfig:
    kind: str = field(validator=_kind)
    #: Number of seeds (estimation sweep and crossing road) or samples per
    #: grid point (planning sweep)
    seeds: int = 20
    base_seed: int = 0
    sigmas: Tuple[float, ...] = field(factory=_default_sigmas, converter=tuple)
    agent_counts: Tuple[int, ...] = field(default=(4, 6, 8), converter=tuple)
    beliefs: Tuple[float, ...] = field(default=(0.5, 0.7, 0.9), converter=tuple)
    branching_times: Tuple[float, ...] = field(default=(2.0, 4.0), converter=tuple)
    num_resamples: int = 10000
    confidence: float = 0.95
    failure_threshold: float = 0.2
    #: Number of trajectory snapshots written for plots
    snapshots: int = 1
    scenario: Optional[ScenarioConfig] = None
    pipeline: PipelineConfig = field(factory=PipelineConfig)

    def __attrs_post_init__(self):
        if self.seeds < 1:
            raise ValueError("at least one seed is needed")
        if not 0 <= self.failure_threshold <= 1:
            raise ValueError("the failure threshold must be a fraction")

    @property
    def scenario_config(self) -> ScenarioConfig:
        if self.scenario is not None:
            return self.scenario
        return ScenarioConfig(kind=SCENARIO_OF[self.kind])

    def to_dict(self):
        return attrs.asdict(self, recurse=True)


@frozen
class Sample:
    index: int
    seed: int
    parameters: Dict[str, Any] = field(factory=dict)


def _failed(
    sample: Sample, message: str, stage: str, error: str = "Failure"
) -> Dict[str, Any]:
    return {
        "sample": sample.index,
        "seed": sample.seed,
        **sample.parameters,
        "status": "failed",
        "stage": stage,
        "error": error,
        "message": message,
    }


@contextmanager
def sample_stage(name: str):
    """Tags the errors raised in the block with the stage ``name``"""
    try:
        yield
    except SampleError:
        raise
    except Exception as e:
        raise SampleError(name, e) from e


def _stopped(sample: Sample, methods: Iterable[str]) -> Dict[str, Any]:
    return _failed(
        sample,
        f"simulation stopped ({', '.join(methods)})",
        "simulation",
        "SimulationStopped",
    )


# --- Estimation sweep


def _estimation_samples(config: ExperimentConfig) -> List[Sample]:
    samples = []
    for level, sigma in enumerate(config.sigmas):
        for s in range(config.seeds):
            samples.append(
                Sample(
                    len(samples),
                    config.base_seed + s,
                    {"sigma": float(sigma), "level": level},
                )
            )
    return samples


def _estimate_report(
    estimate: EstimateResult, truth: Dict[int, Trajectory], true_weights, occluded
) -> MetricReport:
    visible = [i for i in estimate.agent_ids if i not in occluded]
    hidden = [i for i in estimate.agent_ids if i in occluded]
    return MetricReport(
        dissimilarity=dissimilarities(true_weights, estimate.weights),
        ade_visible=ade(truth, estimate.trajectories, visible),
        ade_occluded=ade(truth, estimate.trajectories, hidden) if hidden else None,
        extra={
            "converged": estimate.converged,
            "iterations": estimate.iterations,
            "kkt_constraint_violation": estimate.kkt_constraint_violation,
        },
    )


def estimation_sample(config: ExperimentConfig, sample: Sample) -> Dict[str, Any]:
    """Forward solve, noisy observation and estimation with both estimators"""
    with sample_stage("scenario"):
        scenario = build_three_agent_scenario(sample.seed, config.scenario_config)
    game = scenario.game
    solver = config.pipeline.solver
    with sample_stage("truth"):
        truth = solve_olne(game, solver)
    if not truth.converged:
        return _failed(
            sample, "ground-truth game did not converge", "truth", "NotConverged"
        )

    observations = simulate_observations(
        game,
        truth,
        scenario.visibility,
        sample.parameters["sigma"],
        seed=sample.seed * 1000 + sample.parameters["level"],
    )
    template = game.with_initial_states(scenario.priors)
    truth_trajectories = truth.as_mapping()
    true_weights = {agent.id: agent.weights for agent in game.agents}
    occluded = scenario.occluded_ids

    with sample_stage("estimation"):
        aware = estimate_game(
            observations, template, config.pipeline.estimator, solver_config=solver
        )
        ignorant = estimate_game_ignorant(
            observations, template, config.pipeline.estimator, solver_config=solver
        )
    record = {
        "sample": sample.index,
        "seed": sample.seed,
        **sample.parameters,
        "status": "ok",
        "occluded": list(occluded),
        "aware": _estimate_report(
            aware, truth_trajectories, true_weights, occluded
        ).to_dict(),
        "ignorant": _estimate_report(
            ignorant, truth_trajectories, true_weights, occluded
        ).to_dict(),
    }
    if sample.index < config.snapshots:
        record["trajectories"] = {
            "truth": truth_trajectories,
            "aware": dict(aware.trajectories),
            "ignorant": dict(ignorant.trajectories),
        }
    return record


def _visible_dissimilarity(report: Dict[str, Any], occluded=()) -> Optional[float]:
    values = [
        value
        for key, value in report["dissimilarity"].items()
        if int(key) not in occluded
    ]
    return float(np.mean(values)) if values else None


# --- Planning sweep


def _planning_samples(config: ExperimentConfig) -> List[Sample]:
    samples = []
    for count, branching_time in itertools.product(
        config.agent_counts, config.branching_times
    ):
        for s in range(config.seeds):
            samples.append(
                Sample(
                    len(samples),
                    config.base_seed + s,
                    {"agents": int(count), "branching_time": float(branching_time)},
                )
            )
    return samples


def _distances(trace: SimulationTrace, pairs) -> Dict[str, Optional[float]]:
    states = np.swapaxes(trace.states, 0, 1)
    return {
        "d_min": min_mutual_distance(states),
        "d_min_occluded": min_mutual_distance(states, pairs) if pairs else None,
    }


def planning_sample(config: ExperimentConfig, sample: Sample) -> Dict[str, Any]:
    """Ignorant and aware (one per belief) multi-agent planning simulations"""
    branching_time = sample.parameters["branching_time"]
    with sample_stage("scenario"):
        scenario = build_collision_avoidance_scenario(
            sample.parameters["agents"],
            sample.seed,
            attrs.evolve(config.scenario_config, branching_time=branching_time),
        )
    world = World.of(scenario)
    pairs = scenario.occluded_pairs()
    pipeline = attrs.evolve(config.pipeline, branching_time=branching_time, sigma=0.0)

    with sample_stage("simulation"):
        runs = {"ignorant": run_planning_simulation(world, pipeline, aware=False)}
        for belief in config.beliefs:
            runs[f"aware/{belief}"] = run_planning_simulation(
                world, attrs.evolve(pipeline, belief=belief), aware=True
            )

    failed = [name for name, trace in runs.items() if not trace.completed]
    if failed:
        return _stopped(sample, failed)
    record = {
        "sample": sample.index,
        "seed": sample.seed,
        **sample.parameters,
        "status": "ok",
        "occluded_pairs": [list(pair) for pair in pairs],
        "methods": {name: _distances(trace, pairs) for name, trace in runs.items()},
    }
    if sample.index < config.snapshots:
        record["trajectories"] = {
            name: trace.trajectories() for name, trace in runs.items()
        }
    return record


# --- Crossing road


def _crossing_samples(config: ExperimentConfig) -> List[Sample]:
    return [Sample(s, config.base_seed + s) for s in range(config.seeds)]


def estimation_errors(
    trace: SimulationTrace, occluded: Iterable[int]
) -> Dict[str, Optional[float]]:
    """Mean ADE of the estimates of a trace against the true states"""
    occluded = set(occluded)
    ego = trace.config.ego
    visible_errors, occluded_errors = [], []
    for k, estimate in trace.estimates():
        first = estimate.start
        last = first + len(next(iter(estimate.trajectories.values())).states)
        truth = {
            i: Trajectory(
                trace.states[first:last, trace.world.game.index(i)],
                trace.controls[first : last - 1, trace.world.game.index(i)],
            )
            for i in estimate.agent_ids
        }
        others = [i for i in estimate.agent_ids if i != ego]
        visible = [i for i in others if i not in occluded]
        hidden = [i for i in others if i in occluded]
        if visible:
            visible_errors.append(ade(truth, estimate.trajectories, visible))
        if hidden:
            occluded_errors.append(ade(truth, estimate.trajectories, hidden))
    return {
        "ade_visible": float(np.mean(visible_errors)) if visible_errors else None,
        "ade_occluded": float(np.mean(occluded_errors)) if occluded_errors else None,
    }


def crossing_road_sample(config: ExperimentConfig, sample: Sample) -> Dict[str, Any]:
    """Occlusion-aware and occlusion-ignorant pipelines on one crossing road"""
    with sample_stage("scenario"):
        scenario = build_crossing_road_scenario(sample.seed, config.scenario_config)
    world = World.of(scenario)
    pipeline = attrs.evolve(
        config.pipeline,
        ego=scenario.ego_id,
        seed=sample.seed,
        branching_time=scenario.config.branching_time,
        belief=scenario.config.belief,
    )
    occluded = scenario.occluded_ids
    ego_index = scenario.game.index(scenario.ego_id)
    pairs = [(ego_index, scenario.game.index(i)) for i in occluded]

    with sample_stage("simulation"):
        runs = {
            "aware": run_pipeline(world, pipeline),
            "ignorant": run_pipeline_ignorant(world, pipeline),
        }
    failed = [name for name, trace in runs.items() if not trace.completed]
    if failed:
        return _stopped(sample, failed)

    methods = {}
    for name, trace in runs.items():
        methods[name] = {
            **_distances(trace, pairs),
            **estimation_errors(trace, occluded),
            "ego_speed_before_reveal": trace.mean_speed(
                scenario.ego_id, scenario.schedule.reveal_step
            ),
            "fallbacks": sum(1 for plan in trace.plans() if plan.fallback),
            "iterations": float(np.mean([plan.iterations for plan in trace.plans()])),
        }
    record = {
        "sample": sample.index,
        "seed": sample.seed,
        "status": "ok",
        "methods": methods,
    }
    if sample.index < config.snapshots:
        record["trajectories"] = {
            name: trace.trajectories() for name, trace in runs.items()
        }
    return record


SAMPLERS: Dict[str, Tuple[Callable, Callable]] = {
    ESTIMATION_SWEEP: (_estimation_samples, estimation_sample),
    PLANNING_SWEEP: (_planning_samples, planning_sample),
    CROSSING_ROAD_STUDY: (_crossing_samples, crossing_road_sample),
}


def run_sample(config: ExperimentConfig, sample: Sample) -> Dict[str, Any]:
    """Runs one sample; errors are recorded, not raised"""
    _, function = SAMPLERS[config.kind]
    try:
        return function(config, sample)
    except Exception as e:
        logging.debug("Sample %d: %s", sample.index, traceback.format_exc())
        if isinstance(e, SampleError):
            stage, cause = e.stage, e.cause
        else:
            stage, cause = "sample", e
    logging.warning("Sample %d failed at stage %s: %s", sample.index, stage, cause)
    return _failed(sample, str(cause), stage, type(cause).__name__)


# --- Aggregation


def _summary(config: ExperimentConfig, values) -> Optional[Summary]:
    values = [v for v in values if v is not None]
    try:
        return Summary.of(values, config.num_resamples, config.confidence)
    except MetricError:
        return None


def _summary_rows(groups: Dict[Tuple, Dict[str, Optional[Summary]]]):
    for key, metrics in groups.items():
        for metric, summary in metrics.items():
            if summary is None:
                continue
            yield (
                *key,
                metric,
                summary.median,
                summary.lower,
                summary.upper,
                *summary.quartiles,
                summary.count,
            )


@frozen(eq=False)
class ExperimentOutcome:
    config: ExperimentConfig
    records: Tuple[Dict[str, Any], ...] = field(converter=tuple)
    #: Aggregated metrics by group key
    groups: Dict[Tuple, Dict[str, Optional[Summary]]]
    key_names: Tuple[str, ...] = field(converter=tuple)

    @property
    def failures(self) -> int:
        return sum(1 for record in self.records if record["status"] != "ok")

    @property
    def failure_rate(self) -> float:
        return self.failures / len(self.records) if self.records else 0.0

    @property
    def acceptable(self) -> bool:
        return self.failure_rate <= self.config.failure_threshold

    def report(self):
        return {
            "schema": "occlusiongames.experiment-report/1",
            "kind": self.config.kind,
            "samples": len(self.records),
            "failures": self.failures,
            "groups": [
                {
                    **dict(zip(self.key_names, key)),
                    "metrics": metrics,
                }
                for key, metrics in self.groups.items()
            ],
        }


def aggregate(
    config: ExperimentConfig, records: List[Dict[str, Any]]
) -> ExperimentOutcome:
    ok = [r for r in records if r["status"] == "ok"]
    groups = {}

    if config.kind == ESTIMATION_SWEEP:
        key_names = ("sigma", "method")
        for sigma in config.sigmas:
            level = [r for r in ok if r["sigma"] == float(sigma)]
            for method in ("aware", "ignorant"):
                reports = [r[method] for r in level]
                groups[(float(sigma), method)] = {
                    "dissimilarity_visible": _summary(
                        config,
                        [
                            _visible_dissimilarity(r[method], r["occluded"])
                            for r in level
                        ],
                    ),
                    "dissimilarity": _summary(
                        config, [r["mean_dissimilarity"] for r in reports]
                    ),
                    "ade_visible": _summary(
                        config, [r["ade_visible"] for r in reports]
                    ),
                    "ade_occluded": _summary(
                        config, [r["ade_occluded"] for r in reports]
                    ),
                }

    elif config.kind == PLANNING_SWEEP:
        key_names = ("agents", "branching_time", "method")
        methods = ["ignorant"] + [f"aware/{b}" for b in config.beliefs]
        for count, branching_time in itertools.product(
            config.agent_counts, config.branching_times
        ):
            cell = [
                r
                for r in ok
                if r["agents"] == count and r["branching_time"] == float(branching_time)
            ]
            for method in methods:
                groups[(int(count), float(branching_time), method)] = {
                    metric: _summary(
                        config, [r["methods"][method][metric] for r in cell]
                    )
                    for metric in ("d_min", "d_min_occluded")
                }

    else:
        key_names = ("method",)
        for method in ("aware", "ignorant"):
            groups[(method,)] = {
                metric: _summary(config, [r["methods"][method][metric] for r in ok])
                for metric in (
                    "d_min",
                    "d_min_occluded",
                    "ade_visible",
                    "ade_occluded",
                    "ego_speed_before_reveal",
                )
            }

    return ExperimentOutcome(config, records, groups, key_names)


# --- Driver


def run_experiment(
    config: ExperimentConfig, workers: int = 1, progress: bool = True
) -> ExperimentOutcome:
    """Runs all the samples of a study, in parallel when ``workers > 1``"""
    make_samples, _ = SAMPLERS[config.kind]
    samples = make_samples(config)
    logging.info(
        "Running %d samples of %s with %d worker(s)", len(samples), config.kind, workers
    )

    records: List[Optional[Dict[str, Any]]] = [None] * len(samples)
    with tqdm(total=len(samples), disable=not progress, desc=config.kind) as bar:
        if workers <= 1:
            for sample in samples:
                records[sample.index] = run_sample(config, sample)
                bar.update()
        else:
            pool = concurrent.futures.ProcessPoolExecutor(max_workers=workers)
            with pool as executor:
                futures = {
                    executor.submit(run_sample, config, sample): sample
                    for sample in samples
                }
                for future in concurrent.futures.as_completed(futures):
                    sample = futures[future]
                    try:
                        records[sample.index] = future.result()
                    except Exception as e:
                        logging.warning(
                            "Sample %d lost its worker: %s", sample.index, e
                        )
                        records[sample.index] = _failed(
                            sample, str(e), "worker", type(e).__name__
                        )
                    bar.update()

    outcome = aggregate(config, records)
    if outcome.failures:
        logging.warning(
            "%d of %d samples failed (%.0f%%)",
            outcome.failures,
            len(records),
            100 * outcome.failure_rate,
        )
    return outcome


def write_outcome(
    outcome: ExperimentOutcome,
    directory: Path,
    manifest: RunManifest,
    format: str = "csv",
):
    """Per-sample records, aggregated report and plot data"""
    directory = Path(directory)
    config = outcome.config

    def written(path):
        manifest.add_output(path)
        return path

    records = [
        {key: value for key, value in record.items() if key != "trajectories"}
        for record in outcome.records
    ]
    written(
        write_ndjson(
            directory / "samples.ndjson",
            {
                "schema": "occlusiongames.samples/1",
                "kind": config.kind,
                "config": config,
            },
            records,
        )
    )
    written(write_json(directory / "report.json", outcome.report()))

    columns = (*outcome.key_names, *SUMMARY_COLUMNS)
    metadata = {"kind": config.kind, "confidence": config.confidence}
    if format == "csv":
        written(
            write_table(
                directory / "summary.csv",
                SUMMARY_SCHEMA,
                columns,
                _summary_rows(outcome.groups),
                metadata,
            )
        )
    else:
        rows = [dict(zip(columns, row)) for row in _summary_rows(outcome.groups)]
        written(
            write_json(
                directory / "summary.json",
                {"schema": SUMMARY_SCHEMA, **metadata, "rows": rows},
            )
        )

    if config.kind == PLANNING_SWEEP:
        rows = [
            (r["agents"], r["branching_time"], method, r["seed"], *values.values())
            for r in outcome.records
            if r["status"] == "ok"
            for method, values in r["methods"].items()
        ]
        written(
            write_table(
                directory / "distances.csv",
                "occlusiongames.distances/1",
                (
                    "agents",
                    "branching_time",
                    "method",
                    "seed",
                    "d_min",
                    "d_min_occluded",
                ),
                rows,
            )
        )

    for record in outcome.records:
        for method, trajectories in record.get("trajectories", {}).items():
            tag = method.replace("/", "-")
            written(
                write_trajectories(
                    directory / f"trajectories-{record['sample']}-{tag}.csv",
                    trajectories,
                    {
                        "sample": record["sample"],
                        "seed": record["seed"],
                        "method": method,
                    },
                )
            )
