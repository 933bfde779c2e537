import numpy as np
import pytest

from occlusiongames.errors import DimensionError, NonFiniteError
from occlusiongames.features import GoalFeature
from occlusiongames.game import (
    AgentSpec,
    GameSpec,
    SolverResult,
    Trajectory,
    VisibilityModel,
    VisibilitySchedule,
    validate_game_spec,
)

from .games import crossing_game, three_agent_game


def test_trajectory_lengths():
    with pytest.raises(DimensionError):
        Trajectory(np.zeros((3, 4)), np.zeros((3, 2)))

    trajectory = Trajectory(np.zeros((4, 4)), np.zeros((3, 2)))
    assert trajectory.horizon == 3
    assert trajectory.positions.shape == (4, 2)


def test_trajectory_non_finite():
    states = np.zeros((2, 4))
    states[1, 0] = np.nan
    with pytest.raises(NonFiniteError):
        Trajectory(states, np.zeros((1, 2)))


def test_arrays_are_read_only():
    game = crossing_game()
    with pytest.raises(ValueError):
        game.agents[0].initial_state[0] = 3.0


def test_validate_game_spec():
    assert validate_game_spec(crossing_game()) == []

    game = crossing_game()
    bad = GameSpec(
        0.0,
        0,
        [
            game.agents[0].evolve(weights=[-1.0, 0.0]),
            game.agents[1].evolve(id=0),
        ],
    )
    problems = validate_game_spec(bad)
    assert "horizon must be positive" in problems
    assert "dt must be positive" in problems
    assert "agent 0: negative weight at index 0" in problems
    assert "agent 0: no strictly positive weight" in problems
    assert "agent 1: duplicate id 0" in problems


def test_agent_weights_match_features():
    with pytest.raises(DimensionError):
        AgentSpec(0, np.zeros(4), [GoalFeature([1.0, 1.0])], [1.0, 2.0])


def test_subgame_keeps_order():
    game = three_agent_game()
    sub = game.subgame([2, 0])
    assert sub.agent_ids == (0, 2)
    with pytest.raises(KeyError):
        game.subgame([5])


def test_with_initial_states():
    game = crossing_game()
    moved = game.with_initial_states({1: [0.0, 0.0, 1.0, 0.0]})
    assert np.array_equal(moved.agent(1).initial_state, [0.0, 0.0, 1.0, 0.0])
    assert np.array_equal(moved.agent(0).initial_state, game.agent(0).initial_state)

    with pytest.raises(DimensionError):
        game.with_initial_states(np.zeros((3, 4)))


def test_advanced_shifts_goal_sequences():
    goals = np.arange(20, dtype=float).reshape(10, 2)
    game = GameSpec(
        0.1, 3, [AgentSpec(0, np.zeros(4), [GoalFeature(goals)], [1.0])]
    )
    shifted = game.advanced(4)
    assert np.array_equal(shifted.agents[0].features[0].at(0), goals[4])
    # Past the end, the last goal is used
    assert np.array_equal(shifted.agents[0].features[0].at(20), goals[-1])


def test_game_dict():
    game = crossing_game()
    loaded = GameSpec.from_dict(game.to_dict())
    assert loaded.agent_ids == game.agent_ids
    assert np.array_equal(loaded.initial_states, game.initial_states)
    assert [f.KIND for f in loaded.agents[0].features] == ["goal", "effort"]


def test_visibility_model():
    ids = [0, 1, 2]
    visibility = VisibilityModel(ids, [0, 1], {0: [0, 1], 1: ids, 2: ids})
    assert visibility.occluded_set == {2}
    assert visibility.visible_to(0) == {0, 1}
    assert visibility.for_observer(1).visible_set == {0, 1, 2}

    with pytest.raises(ValueError):
        VisibilityModel(ids, [0, 3], {})
    with pytest.raises(ValueError):
        # Every agent sees itself
        VisibilityModel(ids, ids, {0: [1]})


def test_visibility_matrix():
    matrix = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 1]], dtype=bool)
    visibility = VisibilityModel.from_matrix([0, 1, 2], matrix)
    assert visibility.visible_to(0) == {0, 2}
    assert np.array_equal(visibility.matrix([0, 1, 2]), matrix)


def test_visibility_schedule():
    ids = [0, 1]
    before = VisibilityModel(ids, [0], {0: [0], 1: ids}, observer=0)
    after = VisibilityModel.full(ids)
    schedule = VisibilitySchedule(before, after, 5)
    assert schedule.at(4) is before
    assert schedule.at(5) is after


def test_solver_result_rejects_false_convergence():
    trajectory = Trajectory(np.zeros((3, 4)), np.zeros((2, 2)))

    def result(converged, residual):
        return SolverResult(
            agent_ids=[0],
            trajectories=[trajectory],
            multipliers=np.zeros((1, 2, 4)),
            kkt_residual_norm=residual,
            iterations=4,
            converged=converged,
            tolerance=1e-6,
        )

    assert result(True, 1e-7).converged
    assert not result(False, 1e-3).converged
    with pytest.raises(ValueError):
        result(True, 1e-3)
    with pytest.raises(ValueError):
        result(True, float("nan"))
