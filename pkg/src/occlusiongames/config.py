"""Configuration files

A configuration is a YAML document with a ``version`` (currently 1) and a
``kind`` (``game``, ``estimate``, ``pipeline`` or ``experiment``). Sections
are validated by marshmallow schemas which build the domain objects; unknown
keys are errors.
"""
import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import marshmallow as mm
import numpy as np
import yaml
from attrs import field, frozen

from .contingency import ContingencySpec
from .errors import ConfigError, GameError
from .experiments import EXPERIMENT_KINDS, ExperimentConfig
from .features import CostFeature
from .game import (
    DYNAMICS_KINDS,
    AgentSpec,
    GameSpec,
    VisibilityModel,
    VisibilitySchedule,
    validate_game_spec,
)
from .inverse import EstimatorConfig
from .nash import NashSolverConfig
from .pipeline import ABSOLUTE, RELATIVE, PipelineConfig, World
from .scenarios import SCENARIO_KINDS, Scenario, ScenarioConfig, build_scenario
from .utils import dumps

VERSION = 1

GAME = "game"
ESTIMATE = "estimate"
PIPELINE = "pipeline"
EXPERIMENT = "experiment"

PIPELINE_MODES = ("aware", "ignorant", "planning-aware", "planning-ignorant")


def _vector(size: Optional[int] = None, **kwargs):
    return mm.fields.List(
        mm.fields.Float(),
        validate=mm.validate.Length(equal=size) if size is not None else None,
        **kwargs,
    )


def _positive(**kwargs):
    return mm.fields.Float(
        validate=mm.validate.Range(min=0, min_inclusive=False), **kwargs
    )


def _build(factory, data):
    """Builds a domain object, turning its validation errors into schema errors"""
    try:
        return factory(**data)
    except (ValueError, GameError) as e:
        raise mm.ValidationError(str(e))


# --- Game


class FeatureField(mm.fields.Field):
    """A cost feature, whose schema depends on its ``kind``"""

    def _deserialize(self, value, attr, data, **kwargs):
        if not isinstance(value, Mapping) or "kind" not in value:
            raise mm.ValidationError("a feature needs a kind")
        schema = FEATURE_SCHEMAS.get(value["kind"])
        if schema is None:
            raise mm.ValidationError(
                f"unknown feature kind {value['kind']!r}"
                f" (known: {', '.join(sorted(FEATURE_SCHEMAS))})"
            )
        return schema().load(value)


class _FeatureSchema(mm.Schema):
    kind = mm.fields.String(required=True)

    @mm.post_load
    def make_feature(self, data, **kwargs):
        try:
            return CostFeature.from_dict(data)
        except (ValueError, GameError) as e:
            raise mm.ValidationError(str(e))


class GoalSchema(_FeatureSchema):
    #: a position, or one position per time index
    goal = mm.fields.Raw(required=True)
    offset = mm.fields.Integer(validate=mm.validate.Range(min=0))


class ProximitySchema(_FeatureSchema):
    epsilon = mm.fields.Float(validate=mm.validate.Range(min=0))


class EffortSchema(_FeatureSchema):
    pass


class LaneSchema(_FeatureSchema):
    point = _vector(2, required=True)
    direction = _vector(2, required=True)


FEATURE_SCHEMAS = {
    "goal": GoalSchema,
    "proximity": ProximitySchema,
    "effort": EffortSchema,
    "lane": LaneSchema,
}


class AgentSchema(mm.Schema):
    id = mm.fields.Integer(required=True)
    initial_state = _vector(4, required=True)
    features = mm.fields.List(FeatureField(), required=True)
    #: optional for estimation templates (uniform weights)
    weights = _vector()

    @mm.post_load
    def make_agent(self, data, **kwargs):
        data.setdefault("weights", np.ones(len(data["features"])))
        if len(data["weights"]) != len(data["features"]):
            raise mm.ValidationError(
                f"{len(data['weights'])} weights for {len(data['features'])} features",
                "weights",
            )
        return _build(AgentSpec, data)


class GameSchema(mm.Schema):
    dt = _positive(required=True)
    horizon = mm.fields.Integer(required=True, validate=mm.validate.Range(min=1))
    dynamics = mm.fields.String(validate=mm.validate.OneOf(DYNAMICS_KINDS))
    agents = mm.fields.List(mm.fields.Nested(AgentSchema), required=True)

    @mm.post_load
    def make_game(self, data, **kwargs):
        game = _build(GameSpec, data)
        problems = validate_game_spec(game)
        if problems:
            raise mm.ValidationError(problems, "agents")
        return game


class VisibilitySchema(mm.Schema):
    agents = mm.fields.List(mm.fields.Integer(), required=True)
    visible = mm.fields.List(mm.fields.Integer(), required=True)
    per_observer = mm.fields.Dict(
        keys=mm.fields.Integer(), values=mm.fields.List(mm.fields.Integer())
    )
    observer = mm.fields.Integer(allow_none=True)

    @mm.post_load
    def make_visibility(self, data, **kwargs):
        return _build(
            VisibilityModel,
            {
                "agents": data["agents"],
                "visible_set": data["visible"],
                "per_observer": data.get("per_observer", {}),
                "observer": data.get("observer"),
            },
        )


class ScheduleSchema(mm.Schema):
    before = mm.fields.Nested(VisibilitySchema, required=True)
    after = mm.fields.Nested(VisibilitySchema, required=True)
    reveal_step = mm.fields.Integer(required=True, validate=mm.validate.Range(min=0))

    @mm.post_load
    def make_schedule(self, data, **kwargs):
        return VisibilitySchedule(**data)


class WorldSchema(mm.Schema):
    """A game with who sees whom, and the priors of the unseen agents"""

    game = mm.fields.Nested(GameSchema, required=True)
    schedule = mm.fields.Nested(ScheduleSchema)
    priors = mm.fields.Dict(keys=mm.fields.Integer(), values=_vector(4))

    @mm.post_load
    def make_world(self, data, **kwargs):
        game = data["game"]
        schedule = data.get("schedule") or VisibilitySchedule.static(
            VisibilityModel.full(game.agent_ids)
        )
        return World(game, schedule, data.get("priors", {}))


# --- Solvers


class SolverSchema(mm.Schema):
    kkt_tolerance = _positive()
    max_iterations = mm.fields.Integer(validate=mm.validate.Range(min=1))
    armijo = mm.fields.Float()
    backtracking = mm.fields.Float()
    min_step = _positive()
    levenberg_floor = _positive()
    continuation = mm.fields.Boolean()
    continuation_scale = mm.fields.Float(
        validate=mm.validate.Range(min=1, min_inclusive=False)
    )
    max_stages = mm.fields.Integer(validate=mm.validate.Range(min=1))

    @mm.post_load
    def make_config(self, data, **kwargs):
        return _build(NashSolverConfig, data)


class EstimatorSchema(mm.Schema):
    constraint_tol = _positive()
    stationarity_tol = _positive()
    max_outer = mm.fields.Integer(validate=mm.validate.Range(min=1))
    max_inner = mm.fields.Integer(validate=mm.validate.Range(min=1))
    initial_penalty = _positive()
    penalty_growth = _positive()
    max_penalty = _positive()
    levenberg = _positive()
    smoothing_window = mm.fields.Integer(validate=mm.validate.Range(min=1))
    cold_start = mm.fields.Boolean()
    restore_feasibility = mm.fields.Boolean()

    @mm.post_load
    def make_config(self, data, **kwargs):
        return _build(EstimatorConfig, data)


@frozen
class ContingencySettings:
    """Who plans a contingency game, and against which hidden agents"""

    ego: int
    occluded: tuple = field(converter=tuple)
    belief: float = 0.5
    branching_time: Optional[float] = None
    branching_step: Optional[int] = None

    def spec(self, game: GameSpec) -> ContingencySpec:
        return ContingencySpec.from_game(
            game,
            self.ego,
            self.occluded,
            self.belief,
            branching_time=self.branching_time,
            branching_step=self.branching_step,
        )


class ContingencySchema(mm.Schema):
    ego = mm.fields.Integer(required=True)
    occluded = mm.fields.List(mm.fields.Integer(), required=True)
    belief = mm.fields.Float(required=True, validate=mm.validate.Range(min=0, max=1))
    branching_time = mm.fields.Float(validate=mm.validate.Range(min=0))
    branching_step = mm.fields.Integer(validate=mm.validate.Range(min=0))

    @mm.validates_schema
    def check_branching(self, data, **kwargs):
        if ("branching_time" in data) == ("branching_step" in data):
            raise mm.ValidationError(
                "give either branching_time or branching_step", "branching_time"
            )

    @mm.post_load
    def make_settings(self, data, **kwargs):
        return ContingencySettings(**data)


# --- Scenarios, pipelines and experiments


@frozen
class ScenarioSelection:
    config: ScenarioConfig
    seed: int = 0

    def build(self, seed: Optional[int] = None) -> Scenario:
        return build_scenario(self.config, self.seed if seed is None else seed)


class ScenarioSchema(mm.Schema):
    kind = mm.fields.String(required=True, validate=mm.validate.OneOf(SCENARIO_KINDS))
    seed = mm.fields.Integer()
    num_agents = mm.fields.Integer(validate=mm.validate.Range(min=2), allow_none=True)
    dt = _positive()
    horizon = mm.fields.Integer(validate=mm.validate.Range(min=1))
    region = _positive()
    radius = _positive()
    min_separation = mm.fields.Float(validate=mm.validate.Range(min=0))
    goal_noise = mm.fields.Float(validate=mm.validate.Range(min=0))
    max_speed = _positive()
    occlusion_probability = mm.fields.Float(validate=mm.validate.Range(min=0, max=1))
    branching_time = mm.fields.Float(validate=mm.validate.Range(min=0))
    belief = mm.fields.Float(validate=mm.validate.Range(min=0, max=1))
    sigma = mm.fields.Float(validate=mm.validate.Range(min=0))
    proximity_epsilon = mm.fields.Float(validate=mm.validate.Range(min=0))
    goal_weight = _vector(2)
    proximity_weight = _vector(2)
    effort_weight = _vector(2)
    lane_weight = _vector(2)
    lane_width = _positive()
    road_length = _positive()
    goal_steps = mm.fields.Integer(validate=mm.validate.Range(min=1))
    goal_lookahead = mm.fields.Integer(validate=mm.validate.Range(min=0))

    @mm.post_load
    def make_selection(self, data, **kwargs):
        seed = data.pop("seed", 0)
        return ScenarioSelection(_build(ScenarioConfig, data), seed)


class PipelineSchema(mm.Schema):
    window = mm.fields.Integer(validate=mm.validate.Range(min=2))
    steps = mm.fields.Integer(validate=mm.validate.Range(min=1))
    horizon = mm.fields.Integer(validate=mm.validate.Range(min=1), allow_none=True)
    branching_time = mm.fields.Float(validate=mm.validate.Range(min=0))
    branching_mode = mm.fields.String(validate=mm.validate.OneOf((ABSOLUTE, RELATIVE)))
    belief = mm.fields.Float(validate=mm.validate.Range(min=0, max=1))
    sigma = mm.fields.Float(validate=mm.validate.Range(min=0))
    ego = mm.fields.Integer()
    seed = mm.fields.Integer()
    warm_start = mm.fields.Boolean()


class ExperimentSchema(mm.Schema):
    kind = mm.fields.String(required=True, validate=mm.validate.OneOf(EXPERIMENT_KINDS))
    seeds = mm.fields.Integer(validate=mm.validate.Range(min=1))
    base_seed = mm.fields.Integer()
    sigmas = mm.fields.List(mm.fields.Float(validate=mm.validate.Range(min=0)))
    agent_counts = mm.fields.List(mm.fields.Integer(validate=mm.validate.Range(min=2)))
    beliefs = mm.fields.List(mm.fields.Float(validate=mm.validate.Range(min=0, max=1)))
    branching_times = mm.fields.List(mm.fields.Float(validate=mm.validate.Range(min=0)))
    num_resamples = mm.fields.Integer(validate=mm.validate.Range(min=1))
    confidence = mm.fields.Float(
        validate=mm.validate.Range(
            min=0, max=1, min_inclusive=False, max_inclusive=False
        )
    )
    failure_threshold = mm.fields.Float(validate=mm.validate.Range(min=0, max=1))
    snapshots = mm.fields.Integer(validate=mm.validate.Range(min=0))


# --- Documents


class _DocumentSchema(mm.Schema):
    KIND = None

    version = mm.fields.Integer(required=True, validate=mm.validate.Equal(VERSION))
    kind = mm.fields.String(required=True)

    @mm.validates("kind")
    def check_kind(self, value, **kwargs):
        if value != self.KIND:
            raise mm.ValidationError(f"expected {self.KIND!r}")


def _pipeline_config(data) -> PipelineConfig:
    values = dict(data.get("pipeline", {}))
    if "solver" in data:
        values["solver"] = data["solver"]
    if "estimator" in data:
        values["estimator"] = data["estimator"]
    try:
        return PipelineConfig(**values)
    except ValueError as e:
        raise mm.ValidationError({"pipeline": [str(e)]})


def _world(data) -> Optional[World]:
    if "world" in data and "scenario" in data:
        raise mm.ValidationError("give either a world or a scenario", "scenario")
    if "world" in data:
        return data["world"]
    if "scenario" in data:
        return World.of(data["scenario"].build())
    return None


@frozen(eq=False)
class SolveConfig:
    world: World
    solver: NashSolverConfig
    contingency: Optional[ContingencySettings] = None


class SolveDocumentSchema(_DocumentSchema):
    KIND = GAME

    world = mm.fields.Nested(WorldSchema)
    scenario = mm.fields.Nested(ScenarioSchema)
    solver = mm.fields.Nested(SolverSchema)
    contingency = mm.fields.Nested(ContingencySchema)

    @mm.post_load
    def make_config(self, data, **kwargs):
        world = _world(data)
        if world is None:
            raise mm.ValidationError("a world or a scenario is required", "world")
        return SolveConfig(
            world, data.get("solver", NashSolverConfig()), data.get("contingency")
        )


@frozen(eq=False)
class EstimateConfig:
    template: GameSpec
    estimator: EstimatorConfig
    solver: NashSolverConfig
    known_weights: Dict[int, Any] = field(factory=dict)


class EstimateDocumentSchema(_DocumentSchema):
    KIND = ESTIMATE

    template = mm.fields.Nested(GameSchema, required=True)
    estimator = mm.fields.Nested(EstimatorSchema)
    solver = mm.fields.Nested(SolverSchema)
    known_weights = mm.fields.Dict(keys=mm.fields.Integer(), values=_vector())

    @mm.post_load
    def make_config(self, data, **kwargs):
        return EstimateConfig(
            data["template"],
            data.get("estimator", EstimatorConfig()),
            data.get("solver", NashSolverConfig()),
            data.get("known_weights", {}),
        )


@frozen(eq=False)
class PipelineRun:
    world: World
    config: PipelineConfig
    mode: str = "aware"


class PipelineDocumentSchema(_DocumentSchema):
    KIND = PIPELINE

    world = mm.fields.Nested(WorldSchema)
    scenario = mm.fields.Nested(ScenarioSchema)
    mode = mm.fields.String(validate=mm.validate.OneOf(PIPELINE_MODES))
    pipeline = mm.fields.Nested(PipelineSchema)
    solver = mm.fields.Nested(SolverSchema)
    estimator = mm.fields.Nested(EstimatorSchema)

    @mm.post_load
    def make_config(self, data, **kwargs):
        world = _world(data)
        if world is None:
            raise mm.ValidationError("a world or a scenario is required", "world")
        return PipelineRun(world, _pipeline_config(data), data.get("mode", "aware"))


class ExperimentDocumentSchema(_DocumentSchema):
    KIND = EXPERIMENT

    experiment = mm.fields.Nested(ExperimentSchema, required=True)
    scenario = mm.fields.Nested(ScenarioSchema)
    pipeline = mm.fields.Nested(PipelineSchema)
    solver = mm.fields.Nested(SolverSchema)
    estimator = mm.fields.Nested(EstimatorSchema)

    @mm.post_load
    def make_config(self, data, **kwargs):
        values = dict(data["experiment"])
        if "scenario" in data:
            values["scenario"] = data["scenario"].config
        values["pipeline"] = _pipeline_config(data)
        try:
            return ExperimentConfig(**values)
        except ValueError as e:
            raise mm.ValidationError({"experiment": [str(e)]})


DOCUMENTS = {
    GAME: SolveDocumentSchema,
    ESTIMATE: EstimateDocumentSchema,
    PIPELINE: PipelineDocumentSchema,
    EXPERIMENT: ExperimentDocumentSchema,
}


# --- Loading and dumping


def flatten_errors(messages: Union[Mapping, List, str], prefix: str = "") -> List[str]:
    """Turns marshmallow's nested messages into ``dotted.path: message`` lines"""
    if isinstance(messages, str):
        return [f"{prefix}: {messages}" if prefix else messages]
    if isinstance(messages, Mapping):
        problems = []
        for key, value in messages.items():
            if key == "_schema":
                path = prefix
            else:
                path = f"{prefix}.{key}" if prefix else str(key)
            problems.extend(flatten_errors(value, path))
        return problems
    return [
        problem for message in messages for problem in flatten_errors(message, prefix)
    ]


def _with_seed(data: Mapping[str, Any], seed: int) -> Dict[str, Any]:
    """The document with the seed of its scenario, pipeline or experiment replaced"""
    data = copy.deepcopy(dict(data))
    if isinstance(data.get("scenario"), Mapping):
        data["scenario"]["seed"] = seed
    if data.get("kind") == PIPELINE:
        data.setdefault("pipeline", {})["seed"] = seed
    if data.get("kind") == EXPERIMENT and isinstance(data.get("experiment"), Mapping):
        data["experiment"]["base_seed"] = seed
    return data


def parse_config(data: Any, path: Optional[Path] = None, seed: Optional[int] = None):
    """Validates a configuration document and builds its domain object

    A ``seed`` overrides the seeds given in the document.
    """
    if not isinstance(data, Mapping):
        raise ConfigError(["the configuration must be a mapping"], path)
    if seed is not None:
        data = _with_seed(data, seed)
    kind = data.get("kind")
    if kind not in DOCUMENTS:
        raise ConfigError(
            [f"kind: must be one of {', '.join(DOCUMENTS)} (got {kind!r})"], path
        )
    try:
        return DOCUMENTS[kind]().load(data)
    except mm.ValidationError as e:
        raise ConfigError(flatten_errors(e.messages), path)


def load_config(path: Path, seed: Optional[int] = None):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError([f"cannot read the file ({e.strerror})"], path)
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}: " if mark else ""
        raise ConfigError([f"{where}{getattr(e, 'problem', None) or e}"], path)
    config = parse_config(data, path, seed)
    logging.debug("Loaded a %s configuration from %s", data["kind"], path)
    return config


def _plain(o) -> Any:
    """Plain lists, dicts and numbers"""
    return json.loads(dumps(o))


def world_document(world: World, **sections) -> Dict[str, Any]:
    """A ``game`` document holding a world, which loads back to the same world"""
    return {
        "version": VERSION,
        "kind": GAME,
        "world": _plain(world.to_dict()),
        **{key: _plain(value) for key, value in sections.items()},
    }


def dump_config(document: Mapping[str, Any]) -> str:
    return yaml.safe_dump(dict(document), sort_keys=False)


def write_config(path: Path, document: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(document))
    return path

