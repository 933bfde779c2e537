"""Planar double-integrator dynamics

``p_{k+1} = p_k + v_k Δ`` and ``v_{k+1} = v_k + a_k Δ``: the position update
uses the velocity before the update, so that one step is exactly the linear
map ``x_{k+1} = A x_k + (B Δ) u_k``.
"""
from typing import List, Sequence, Tuple, Union

import numpy as np

from .errors import NonFiniteError
from .features import GoalFeature
from .game import AgentState, ControlInput, GameSpec, Trajectory

StateLike = Union[AgentState, np.ndarray, Sequence[float]]
ControlLike = Union[ControlInput, np.ndarray, Sequence[float]]


def _check_dt(dt: float):
    if not dt > 0:
        raise ValueError(f"time step must be positive (got {dt})")


def step_dynamics(state: StateLike, control: ControlLike, dt: float):
    """One step of the dynamics

    Returns an `AgentState` when given one, a ``(4,)`` array otherwise.
    """
    _check_dt(dt)
    x = state.as_array() if isinstance(state, AgentState) else np.asarray(state, float)
    u = (
        control.as_array()
        if isinstance(control, ControlInput)
        else np.asarray(control, float)
    )
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise NonFiniteError("dynamics input")

    next_state = np.concatenate([x[:2] + x[2:] * dt, x[2:] + u * dt])
    if isinstance(state, AgentState):
        return AgentState.from_array(next_state)
    return next_state


def dynamics_jacobians(dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Returns ``(A, B Δ)``"""
    _check_dt(dt)
    A = np.eye(4)
    A[:2, 2:] = dt * np.eye(2)
    B = np.zeros((4, 2))
    B[2:, :] = dt * np.eye(2)
    return A, B


def simulate_dynamics(initial_state: StateLike, controls, dt: float) -> Trajectory:
    """Rolls the dynamics out from ``initial_state``"""
    x = (
        initial_state.as_array()
        if isinstance(initial_state, AgentState)
        else np.asarray(initial_state, float)
    )
    controls = np.asarray(controls, float).reshape(-1, 2)
    states = [x]
    for u in controls:
        states.append(step_dynamics(states[-1], u, dt))
    return Trajectory(states, controls)


def goal_of(features, k: int):
    """Goal position of the first goal feature at time ``k`` (None if none)"""
    for feature in features:
        if isinstance(feature, GoalFeature):
            return feature.at(k)
    return None


def straight_line_warm_start(spec: GameSpec) -> List[Trajectory]:
    """Constant-velocity rollouts reaching each agent's goal at the horizon end

    The first control sets the velocity to ``(p_g − p_0) / (T Δ)``; the next
    ones are zero. Agents without a goal keep their velocity.
    """
    trajectories = []
    for agent in spec.agents:
        controls = np.zeros((spec.horizon, 2))
        goal = goal_of(agent.features, spec.horizon)
        if goal is not None and spec.horizon > 0:
            x0 = agent.initial_state
            velocity = (goal - x0[:2]) / (spec.horizon * spec.dt)
            controls[0] = (velocity - x0[2:]) / spec.dt
        trajectories.append(simulate_dynamics(agent.initial_state, controls, spec.dt))
    return trajectories


def shift_trajectory(trajectory: Trajectory, offset: int, dt: float) -> Trajectory:
    """Drops the first ``offset`` steps, padding the end with zero controls"""
    if offset == 0:
        return trajectory
    offset = min(offset, trajectory.horizon)
    controls = np.concatenate(
        [trajectory.controls[offset:], np.zeros((offset, 2))], axis=0
    )
    return simulate_dynamics(trajectory.states[offset], controls, dt)


def joint_arrays(trajectories: Sequence[Trajectory]) -> Tuple[np.ndarray, np.ndarray]:
    """Stacks trajectories into ``(M, T + 1, 4)`` states and ``(M, T, 2)`` controls"""
    return (
        np.stack([t.states for t in trajectories]),
        np.stack([t.controls for t in trajectories]),
    )
