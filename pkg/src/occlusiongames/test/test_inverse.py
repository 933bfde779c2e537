import numpy as np
import pytest

from occlusiongames.errors import ObservationError
from occlusiongames.game import VisibilityModel
from occlusiongames.inverse import (
    EstimatorConfig,
    ObservationSequence,
    estimate_game,
    estimate_game_ignorant,
    simulate_observations,
)
from occlusiongames.metrics import ade, cosine_dissimilarity
from occlusiongames.nash import solve_olne

from .games import crossing_game, three_agent_game


@pytest.fixture(scope="module")
def crossing():
    game = crossing_game(horizon=6)
    truth = solve_olne(game)
    assert truth.converged
    return game, truth


def test_observation_checks():
    visibility = VisibilityModel([0, 1], [0, 1], {})
    with pytest.raises(ObservationError):
        ObservationSequence({0: np.zeros((3, 2))}, 0.0, visibility)
    with pytest.raises(ObservationError):
        ObservationSequence({0: np.zeros((3, 2)), 1: np.zeros((4, 2))}, 0.0, visibility)
    with pytest.raises(ObservationError):
        ObservationSequence(
            {0: np.zeros((3, 2)), 1: np.zeros((3, 2))}, -1.0, visibility
        )


def test_observation_window():
    visibility = VisibilityModel([0], [0], {})
    positions = np.arange(20, dtype=float).reshape(10, 2)
    observations = ObservationSequence({0: positions}, 0.0, visibility, start=5)
    window = observations.window(7, 9)
    assert window.start == 7
    assert window.num_steps == 2
    assert np.array_equal(window.positions[0], positions[2:5])
    with pytest.raises(ObservationError):
        observations.window(3, 6)


def test_simulated_observations_are_seeded(crossing):
    game, truth = crossing
    visibility = VisibilityModel.full(game.agent_ids)
    first = simulate_observations(game, truth, visibility, 0.05, seed=3)
    second = simulate_observations(game, truth, visibility, 0.05, seed=3)
    assert np.array_equal(first.positions[1], second.positions[1])

    exact = simulate_observations(game, truth, visibility, 0.0)
    assert np.array_equal(exact.positions[0], truth.trajectory(0).positions)


def test_noiseless_estimation(crossing):
    game, truth = crossing
    observations = simulate_observations(
        game, truth, VisibilityModel.full(game.agent_ids), 0.0
    )
    result = estimate_game(observations, game.with_weights({0: [1, 1], 1: [1, 1]}))

    assert result.converged
    assert result.objective <= 1e-8
    assert ade(truth.as_mapping(), result.trajectories, game.agent_ids) <= 1e-3
    for agent in game.agents:
        assert cosine_dissimilarity(agent.weights, result.weights[agent.id]) <= 1e-4


def test_noiseless_three_agent_estimation():
    game = three_agent_game(proximity=2.0)
    truth = solve_olne(game)
    assert truth.converged
    observations = simulate_observations(
        game, truth, VisibilityModel.full(game.agent_ids), 0.0
    )
    template = game.with_weights({i: [1, 1, 1] for i in game.agent_ids})
    result = estimate_game(observations, template)

    assert result.converged
    assert ade(truth.as_mapping(), result.trajectories, game.agent_ids) <= 1e-3
    for agent in game.agents:
        assert cosine_dissimilarity(agent.weights, result.weights[agent.id]) <= 1e-3


def test_estimated_weights_are_normalized():
    game = three_agent_game(horizon=5, proximity=1.0)
    truth = solve_olne(game)
    ids = list(game.agent_ids)
    observations = simulate_observations(
        game, truth, VisibilityModel(ids, [0, 1], {}), 0.05, seed=4
    )
    result = estimate_game(observations, game, EstimatorConfig(max_outer=10))
    for agent_id in ids:
        weights = result.weights[agent_id]
        assert np.sum(weights) == pytest.approx(1.0)
        assert np.all(weights >= 0)


def test_objective_is_a_mean(crossing):
    game, truth = crossing
    sigma = 0.05
    observations = simulate_observations(
        game, truth, VisibilityModel.full(game.agent_ids), sigma, seed=1
    )
    result = estimate_game(observations, game, EstimatorConfig(max_outer=10))

    errors = np.concatenate(
        [
            result.trajectories[i].positions - observations.positions[i]
            for i in game.agent_ids
        ]
    )
    assert result.objective == pytest.approx(np.mean(np.sum(errors**2, axis=1)))
    # Of the order of the noise variance, whatever the number of observations
    assert result.objective < 4 * sigma**2


def test_known_weights_are_kept(crossing):
    game, truth = crossing
    observations = simulate_observations(
        game, truth, VisibilityModel.full(game.agent_ids), 0.0
    )
    result = estimate_game(observations, game, known_weights={0: [0.25, 0.75]})
    assert np.allclose(result.weights[0], [0.25, 0.75])


def test_occluded_agent_is_estimated():
    game = three_agent_game(horizon=5, proximity=1.0)
    truth = solve_olne(game)
    ids = list(game.agent_ids)
    visibility = VisibilityModel(ids, [0, 1], {})
    observations = simulate_observations(game, truth, visibility, 0.01, seed=0)
    config = EstimatorConfig(max_outer=20)

    aware = estimate_game(observations, game, config)
    assert aware.agent_ids == (0, 1, 2)
    assert aware.occluded_ids == (2,)
    assert aware.trajectories[2].horizon == 5
    assert aware.provenance["sigma"] == 0.01

    ignorant = estimate_game_ignorant(observations, game, config)
    assert ignorant.ignorant
    assert ignorant.agent_ids == (0, 1)
    assert ignorant.occluded_ids == ()


def test_estimation_needs_two_observations(crossing):
    game, truth = crossing
    visibility = VisibilityModel.full(game.agent_ids)
    observations = ObservationSequence(
        {0: np.zeros((1, 2)), 1: np.zeros((1, 2))}, 0.0, visibility
    )
    with pytest.raises(ObservationError):
        estimate_game(observations, game)


def test_estimator_config_validation():
    with pytest.raises(ValueError):
        EstimatorConfig(constraint_tol=0.0)
    with pytest.raises(ValueError):
        EstimatorConfig(max_outer=0)
