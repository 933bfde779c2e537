import numpy as np
import pytest

from occlusiongames.dynamics import dynamics_jacobians
from occlusiongames.game import validate_trajectory
from occlusiongames.kkt import GameProblem
from occlusiongames.nash import (
    NashSolverConfig,
    kkt_residual,
    local_nash_check,
    solve_olne,
)

from .games import crossing_game, single_agent_game, three_agent_game


def _lqr_controls(game):
    """Optimal controls of a single agent with goal and effort costs

    The positions are linear in the controls, so that the optimum solves a
    linear least-squares problem.
    """
    agent = game.agents[0]
    w_goal, w_effort = agent.weights
    goal = agent.features[0].goal
    A, B = dynamics_jacobians(game.dt)
    T = game.horizon

    rows, targets = [], []
    for k in range(1, T + 1):
        # x_k = A^k x_0 + Σ_j A^(k−1−j) B u_j
        G = np.zeros((4, 2 * T))
        for j in range(k):
            G[:, 2 * j : 2 * j + 2] = np.linalg.matrix_power(A, k - 1 - j) @ B
        free = np.linalg.matrix_power(A, k) @ agent.initial_state
        rows.append(np.sqrt(w_goal) * G[:2])
        targets.append(np.sqrt(w_goal) * (goal - free[:2]))
    rows.append(np.sqrt(w_effort) * np.eye(2 * T))
    targets.append(np.zeros(2 * T))
    u, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(targets), rcond=None)
    return u.reshape(T, 2)


def test_single_agent_is_optimal_control():
    game = single_agent_game()
    result = solve_olne(game)
    assert result.converged
    assert result.kkt_residual_norm <= 1e-6
    assert np.allclose(result.trajectories[0].controls, _lqr_controls(game), atol=1e-5)


def test_linear_quadratic_game_converges_fast():
    result = solve_olne(crossing_game())
    assert result.converged
    # The KKT conditions are linear: one Newton step suffices
    assert result.iterations <= 2


def test_solution_properties():
    game = three_agent_game(proximity=2.0)
    result = solve_olne(game, NashSolverConfig(max_iterations=200))
    assert result.converged
    assert result.agent_ids == game.agent_ids

    for trajectory in result.trajectories:
        assert validate_trajectory(trajectory, game)
    residual = kkt_residual(game, result.trajectories, result.multipliers)
    assert np.max(np.abs(residual)) <= 1e-6

    is_nash, improvement = local_nash_check(game, result, num_perturbations=50)
    assert is_nash, improvement


def test_warm_start_from_solution():
    game = crossing_game(proximity=2.0)
    first = solve_olne(game)
    again = solve_olne(game, warm_start=first)
    assert again.converged
    assert again.iterations <= 1
    assert np.allclose(again.states, first.states, atol=1e-6)


def test_not_converged_is_reported():
    game = three_agent_game(proximity=5.0)
    config = NashSolverConfig(max_iterations=1, kkt_tolerance=1e-12, continuation=False)
    result = solve_olne(game, config)
    assert not result.converged
    assert result.iterations <= 1
    assert result.kkt_residual_norm > 1e-12


def test_solver_config_validation():
    with pytest.raises(ValueError):
        NashSolverConfig(kkt_tolerance=0.0)
    with pytest.raises(ValueError):
        NashSolverConfig(backtracking=1.5)
    with pytest.raises(ValueError):
        NashSolverConfig(continuation_scale=1.0)


@pytest.mark.parametrize("proximity", [0.5, 1.0])
def test_weak_proximity_converges(proximity):
    """Straight-line starts put agents 0 and 2 on a collision course"""
    game = three_agent_game(proximity=proximity)
    result = solve_olne(game)
    assert result.converged, result.kkt_residual_norm
    for trajectory in result.trajectories:
        assert validate_trajectory(trajectory, game)


@pytest.mark.parametrize(
    "config",
    [NashSolverConfig(), NashSolverConfig(max_iterations=3, continuation=False)],
)
def test_reported_residual_is_the_returned_one(config):
    game = three_agent_game(proximity=0.5)
    result = solve_olne(game, config)
    residual = kkt_residual(game, result.trajectories, result.multipliers)
    assert np.max(np.abs(residual)) == pytest.approx(result.kkt_residual_norm)
    assert result.residual_history[-1] == pytest.approx(result.kkt_residual_norm)
    assert result.converged == (result.kkt_residual_norm <= config.kkt_tolerance)


def test_coupling_weights():
    problem = GameProblem.from_game(three_agent_game(proximity=2.0))
    assert problem.coupled
    assert problem.coupling_weights(1.0) is None
    weights = problem.coupling_weights(0.25)
    # goal, proximity, effort
    assert np.allclose(weights[0], [1.0, 0.5, 0.5])

    assert not GameProblem.from_game(three_agent_game()).coupled
