import textwrap

import numpy as np
import pytest
import yaml

from occlusiongames.config import (
    EstimateConfig,
    PipelineRun,
    SolveConfig,
    flatten_errors,
    load_config,
    parse_config,
    world_document,
    write_config,
)
from occlusiongames.errors import ConfigError
from occlusiongames.experiments import PLANNING_SWEEP, ExperimentConfig

from .games import occluded_world

GAME = textwrap.dedent(
    """\
    version: 1
    kind: game
    world:
      game:
        dt: 0.2
        horizon: 5
        agents:
          - id: 0
            initial_state: [-1, 0, 0, 0]
            features:
              - {kind: goal, goal: [1, 0]}
              - {kind: proximity, epsilon: 0.1}
              - {kind: effort}
            weights: [1, 2, 0.5]
          - id: 1
            initial_state: [1, 0.5, 0, 0]
            features:
              - {kind: goal, goal: [-1, 0.5]}
              - {kind: effort}
    solver:
      kkt_tolerance: 1.0e-7
    contingency:
      ego: 0
      occluded: [1]
      belief: 0.6
      branching_time: 0.4
    """
)


def _load(text, seed=None):
    return parse_config(yaml.safe_load(text), seed=seed)


def _problems(text):
    with pytest.raises(ConfigError) as e:
        _load(text)
    return e.value.problems


def test_game_document():
    config = _load(GAME)
    assert isinstance(config, SolveConfig)
    game = config.world.game
    assert game.agent_ids == (0, 1)
    # Missing weights are uniform
    assert np.array_equal(game.agent(1).weights, [1.0, 1.0])
    assert config.solver.kkt_tolerance == 1e-7
    spec = config.contingency.spec(game)
    assert spec.branching_step == 2
    assert spec.hypotheses["theta2"].agent_ids == (0,)
    # Everybody sees everybody by default
    assert config.world.schedule.at(0).occluded_set == frozenset()


def test_errors_have_paths():
    text = GAME.replace("horizon: 5", "horizon: 0").replace(
        "weights: [1, 2, 0.5]", "weights: [1, 2]"
    )
    problems = _problems(text)
    assert any(p.startswith("world.game.horizon:") for p in problems)
    assert any(p.startswith("world.game.agents.0.weights:") for p in problems)


def test_unknown_keys_and_kinds():
    problems = _problems(GAME.replace("kkt_tolerance", "tolerance"))
    assert any(p.startswith("solver.tolerance:") for p in problems)

    problems = _problems(GAME.replace("{kind: effort}", "{kind: speed}"))
    assert any("unknown feature kind 'speed'" in p for p in problems)

    with pytest.raises(ConfigError, match="kind: must be one of"):
        _load("version: 1\nkind: plot\n")
    problems = _problems(GAME.replace("version: 1", "version: 2"))
    assert any(p.startswith("version:") for p in problems)


def test_negative_weights():
    problems = _problems(GAME.replace("[1, 2, 0.5]", "[1, -2, 0.5]"))
    assert "world.game.agents: agent 0: negative weight at index 1" in problems


def test_contingency_branching():
    both = "branching_step: 2\n      branching_time: 0.4"
    problems = _problems(GAME.replace("branching_time: 0.4", both))
    assert any(p.startswith("contingency.branching_time:") for p in problems)


def test_yaml_errors(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("version: 1\nkind: [game\n")
    with pytest.raises(ConfigError, match=r"line \d+, column \d+"):
        load_config(path)

    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.yaml")


def test_world_round_trip(tmp_path):
    world = occluded_world()
    path = write_config(tmp_path / "world.yaml", world_document(world))
    loaded = load_config(path).world

    assert np.array_equal(loaded.game.initial_states, world.game.initial_states)
    assert loaded.schedule.reveal_step == world.schedule.reveal_step
    assert loaded.schedule.before.visible_to(0) == {0, 1}
    assert loaded.schedule.before.observer == 0
    assert np.array_equal(loaded.priors[2], world.priors[2])


def test_estimate_document():
    config = _load(
        textwrap.dedent(
            """\
            version: 1
            kind: estimate
            template:
              dt: 0.1
              horizon: 10
              agents:
                - id: 3
                  initial_state: [0, 0, 0, 0]
                  features: [{kind: goal, goal: [1, 1]}, {kind: effort}]
            estimator:
              max_outer: 5
              cold_start: true
            known_weights:
              3: [0.5, 0.5]
            """
        )
    )
    assert isinstance(config, EstimateConfig)
    assert config.estimator.max_outer == 5
    assert config.estimator.cold_start
    assert config.known_weights[3] == [0.5, 0.5]


PIPELINE = textwrap.dedent(
    """\
    version: 1
    kind: pipeline
    mode: ignorant
    scenario:
      kind: crossing-road
      seed: 4
      horizon: 10
    pipeline:
      window: 5
      steps: 12
      sigma: 0.01
    estimator:
      max_outer: 10
    """
)


def test_pipeline_document():
    config = _load(PIPELINE)
    assert isinstance(config, PipelineRun)
    assert config.mode == "ignorant"
    assert config.world.game.num_agents == 4
    assert config.config.window == 5
    assert config.config.estimator.max_outer == 10

    problems = _problems(PIPELINE.replace("steps: 12", "steps: 3"))
    assert any(p.startswith("pipeline:") for p in problems)


def test_seed_override():
    default = _load(PIPELINE)
    seeded = _load(PIPELINE, seed=9)
    assert seeded.config.seed == 9
    assert not np.array_equal(
        default.world.game.initial_states, seeded.world.game.initial_states
    )


def test_experiment_document():
    config = _load(
        textwrap.dedent(
            """\
            version: 1
            kind: experiment
            experiment:
              kind: planning-sweep
              seeds: 2
              agent_counts: [3]
              beliefs: [0.5]
            scenario:
              kind: collision-avoidance
              horizon: 8
            pipeline:
              steps: 6
              window: 2
            """
        ),
        seed=100,
    )
    assert isinstance(config, ExperimentConfig)
    assert config.kind == PLANNING_SWEEP
    assert config.base_seed == 100
    assert config.scenario.horizon == 8
    assert config.pipeline.steps == 6


def test_flatten_errors():
    messages = {"a": {"b": ["bad"], "_schema": ["worse"]}, "c": {0: {"d": ["x"]}}}
    assert flatten_errors(messages) == ["a.b: bad", "a: worse", "c.0.d: x"]
