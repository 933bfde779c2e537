import numpy as np
import pytest

from occlusiongames.contingency import (
    HYPOTHESES,
    THETA1,
    THETA2,
    ContingencySpec,
    build_contingency_game,
    select_branch,
    solve_contingency,
    to_branching_step,
)
from occlusiongames.errors import ContingencyError, UnknownHypothesisError
from occlusiongames.nash import solve_olne

from .games import three_agent_game


def _spec(belief, branching_step, game=None):
    game = game or three_agent_game(proximity=1.0)
    return ContingencySpec.from_game(
        game, 0, [2], belief, branching_step=branching_step
    )


def test_hypotheses():
    spec = _spec(0.7, 3)
    assert spec.hypotheses[THETA1].agent_ids == (0, 1, 2)
    assert spec.hypotheses[THETA2].agent_ids == (0, 1)
    assert spec.beliefs == {THETA1: 0.7, THETA2: pytest.approx(0.3)}


def test_invalid_specs():
    game = three_agent_game()
    with pytest.raises(ContingencyError):
        _spec(1.5, 2)
    with pytest.raises(ContingencyError):
        _spec(0.5, game.horizon + 1)
    with pytest.raises(ContingencyError):
        ContingencySpec.from_game(game, 0, [0], 0.5, branching_step=1)
    with pytest.raises(ContingencyError):
        ContingencySpec(
            {THETA1: game, THETA2: game.subgame([0, 1]).with_horizon(3)}, 0.5, 1, 0
        )


def test_branching_time():
    assert to_branching_step(2.0, 0.1) == 20
    assert to_branching_step(0.25, 0.1) == 2
    with pytest.raises(ContingencyError):
        to_branching_step(-1.0, 0.1)


@pytest.mark.parametrize("branching_step", [1, 3])
def test_shared_controls_are_tied(branching_step):
    plan = solve_contingency(_spec(0.6, branching_step))
    assert plan.converged
    assert plan.tie_violation <= 1e-8
    assert plan.shared_controls.shape == (branching_step, 2)

    controls = select_branch(plan, THETA2)
    assert np.allclose(controls[:branching_step], plan.shared_controls)
    assert np.allclose(
        controls[branching_step:], plan.ego_trajectory(THETA2).controls[branching_step:]
    )


@pytest.mark.parametrize("branching_step", [0, 3])
@pytest.mark.parametrize("belief,tag", [(1.0, THETA1), (0.0, THETA2)])
def test_certain_belief_is_nash(belief, tag, branching_step):
    """The certain branch is the Nash game of its hypothesis"""
    spec = _spec(belief, branching_step)
    plan = solve_contingency(spec)
    nash = solve_olne(spec.hypotheses[tag])
    assert plan.converged and nash.converged
    for agent_id in spec.hypotheses[tag].agent_ids:
        assert np.allclose(
            plan.trajectory(tag, agent_id).states,
            nash.trajectory(agent_id).states,
            atol=1e-4,
        )


def test_branches_start_together():
    plan = solve_contingency(_spec(0.5, 2))
    first, second = plan.ego_trajectory(THETA1), plan.ego_trajectory(THETA2)
    assert np.allclose(first.states[:3], second.states[:3])


def test_unknown_hypothesis():
    plan = solve_contingency(_spec(0.5, 1))
    with pytest.raises(UnknownHypothesisError):
        plan.ego_trajectory("theta3")
    with pytest.raises(UnknownHypothesisError):
        select_branch(plan, "theta3")


def test_plan_dict():
    plan = solve_contingency(_spec(0.5, 2))
    data = plan.to_dict()
    assert data["branching_step"] == 2
    assert set(data["branches"]) == {THETA1, THETA2}
    assert data["branches"][THETA2]["agent_ids"] == (0, 1)


def test_solved_branches_share_early_controls():
    spec = _spec(0.3, 4)
    plan = solve_contingency(spec)
    assert plan.converged
    first = plan.ego_trajectory(THETA1)
    second = plan.ego_trajectory(THETA2)
    assert np.allclose(first.controls[:4], second.controls[:4], rtol=0, atol=1e-10)
    assert np.allclose(first.states[:5], second.states[:5], rtol=0, atol=1e-10)
    assert not np.allclose(first.controls[4:], second.controls[4:], atol=1e-6)


def test_unlikely_branch_is_solved_accurately():
    """A branch with a zero belief still solves its own hypothesis game"""
    spec = _spec(1.0, 0)
    plan = solve_contingency(spec)
    assert plan.converged

    nash = solve_olne(spec.hypotheses[THETA2])
    assert np.allclose(
        plan.ego_trajectory(THETA2).controls,
        nash.trajectory(0).controls,
        atol=1e-4,
    )

    problem = build_contingency_game(spec)
    z = problem.pack(
        np.stack([t.states for tag in HYPOTHESES for t in plan.trajectories[tag]]),
        np.stack([t.controls for tag in HYPOTHESES for t in plan.trajectories[tag]]),
        np.concatenate([plan.multipliers[tag] for tag in HYPOTHESES]),
        plan.tie_multipliers,
    )
    normalized = problem.row_scale() * problem.residual(z)
    assert np.max(np.abs(normalized)) == pytest.approx(plan.kkt_residual_norm)
