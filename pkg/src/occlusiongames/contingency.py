"""Occlusion-aware contingency games

The ego agent holds a belief over two hypotheses: occluded agents exist
(``theta1``, the full game) or not (``theta2``, the visible agents only).
Each other agent is copied into the branch of each hypothesis it belongs to
and plays the game of its branch; the ego plays both branches at once,
minimising the belief-weighted sum of its costs, and must apply the same
controls in both branches before the branching step.
"""
import logging
import math
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
from attrs import field, frozen

from .dynamics import simulate_dynamics, straight_line_warm_start
from .errors import ContingencyError, UnknownHypothesisError
from .game import STATE_DIM, GameSpec, Trajectory
from .kkt import Body, ControlTie, GameProblem
from .nash import NashSolverConfig, solve_problem
from .utils import frozen_array

#: Occluded agents exist
THETA1 = "theta1"

#: There are no occluded agents
THETA2 = "theta2"

HYPOTHESES = (THETA1, THETA2)

#: Smallest cost scale given to an ego branch (keeps the KKT matrix regular
#: when the belief is degenerate)
BELIEF_FLOOR = 1e-6


def to_branching_step(branching_time: float, dt: float) -> int:
    """Converts a branching time in seconds into the first branch-free step"""
    if branching_time < 0:
        raise ContingencyError("branching_time", "must be nonnegative")
    return int(math.floor(branching_time / dt + 1e-9))


@frozen(eq=False)
class ContingencySpec:
    hypotheses: Mapping[str, GameSpec] = field(converter=dict)
    belief: float = field(converter=float)
    branching_step: int = field(converter=int)
    ego_id: int

    def __attrs_post_init__(self):
        if set(self.hypotheses) != set(HYPOTHESES):
            raise ContingencyError(
                "hypotheses", f"expected {HYPOTHESES}, got {sorted(self.hypotheses)}"
            )
        if not 0 <= self.belief <= 1:
            raise ContingencyError("belief", f"{self.belief} is not in [0, 1]")

        first, second = self.hypotheses[THETA1], self.hypotheses[THETA2]
        for tag, game in self.hypotheses.items():
            if self.ego_id not in game.agent_ids:
                raise ContingencyError("ego_id", f"ego {self.ego_id} not in {tag}")
        if first.dt != second.dt:
            raise ContingencyError("dt", "hypothesis games use different time steps")
        if first.horizon != second.horizon:
            raise ContingencyError("horizon", "hypothesis games use different horizons")
        if first.dynamics != second.dynamics:
            raise ContingencyError(
                "dynamics", "hypothesis games use different dynamics"
            )
        if not np.array_equal(
            first.agent(self.ego_id).initial_state,
            second.agent(self.ego_id).initial_state,
        ):
            raise ContingencyError(
                "initial_state", "ego starts from different states in the hypotheses"
            )
        if not 0 <= self.branching_step <= first.horizon:
            raise ContingencyError(
                "branching_step",
                f"{self.branching_step} is not in [0, {first.horizon}]",
            )

    @property
    def horizon(self) -> int:
        return self.hypotheses[THETA1].horizon

    @property
    def dt(self) -> float:
        return self.hypotheses[THETA1].dt

    @property
    def beliefs(self) -> Dict[str, float]:
        return {THETA1: self.belief, THETA2: 1.0 - self.belief}

    @staticmethod
    def from_game(
        game: GameSpec,
        ego_id: int,
        occluded_ids: Iterable[int],
        belief: float,
        branching_time: Optional[float] = None,
        branching_step: Optional[int] = None,
    ) -> "ContingencySpec":
        """Hypotheses from a full game and the agents hidden from the ego

        The branching point is given either in seconds or in steps.
        """
        occluded = set(occluded_ids)
        if ego_id in occluded:
            raise ContingencyError("occluded_ids", "the ego cannot be occluded")
        if branching_step is None:
            if branching_time is None:
                raise ContingencyError("branching_time", "missing")
            branching_step = to_branching_step(branching_time, game.dt)
        visible = [i for i in game.agent_ids if i not in occluded]
        return ContingencySpec(
            {THETA1: game, THETA2: game.subgame(visible)},
            belief,
            branching_step,
            ego_id,
        )


@frozen(eq=False)
class ContingencyPlan:
    """Solution of a contingency game

    Trajectories are given per hypothesis, in the order of the agents of the
    hypothesis game. The ego controls before ``branching_step`` are shared.
    ``kkt_residual_norm`` divides the ego stationarity rows of each branch by
    the belief of the branch.
    """

    ego_id: int
    belief: float
    branching_step: int
    agent_ids: Mapping[str, Tuple[int, ...]]
    trajectories: Mapping[str, Tuple[Trajectory, ...]]
    multipliers: Mapping[str, np.ndarray]
    tie_multipliers: np.ndarray = field(
        converter=lambda m: frozen_array(np.reshape(m, (-1, 2)), (None, 2), "ties")
    )
    kkt_residual_norm: float = 0.0
    iterations: int = 0
    converged: bool = False
    tolerance: float = 1e-6
    residual_history: Tuple[float, ...] = field(converter=tuple, default=())

    def __attrs_post_init__(self):
        if self.converged and not self.kkt_residual_norm <= self.tolerance:
            raise ValueError("converged plan above tolerance")

    def ego_trajectory(self, hypothesis: str) -> Trajectory:
        self._check(hypothesis)
        index = self.agent_ids[hypothesis].index(self.ego_id)
        return self.trajectories[hypothesis][index]

    def trajectory(self, hypothesis: str, agent_id: int) -> Trajectory:
        self._check(hypothesis)
        return self.trajectories[hypothesis][self.agent_ids[hypothesis].index(agent_id)]

    @property
    def shared_controls(self) -> np.ndarray:
        return self.ego_trajectory(THETA1).controls[: self.branching_step]

    def branch_controls(self, hypothesis: str) -> np.ndarray:
        return self.ego_trajectory(hypothesis).controls[self.branching_step :]

    @property
    def tie_violation(self) -> float:
        if self.branching_step == 0:
            return 0.0
        first = self.ego_trajectory(THETA1).controls[: self.branching_step]
        second = self.ego_trajectory(THETA2).controls[: self.branching_step]
        return float(np.max(np.abs(first - second)))

    def _check(self, hypothesis: str):
        if hypothesis not in self.trajectories:
            raise UnknownHypothesisError(hypothesis, sorted(self.trajectories))

    def to_dict(self):
        return {
            "schema": "occlusiongames.contingency-plan/1",
            "ego_id": self.ego_id,
            "belief": self.belief,
            "branching_step": self.branching_step,
            "shared_controls": self.shared_controls,
            "branches": {
                tag: {
                    "agent_ids": self.agent_ids[tag],
                    "ego_controls": self.branch_controls(tag),
                    "trajectories": list(self.trajectories[tag]),
                }
                for tag in HYPOTHESES
            },
            "kkt_residual_norm": self.kkt_residual_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "tie_violation": self.tie_violation,
            "residual_history": self.residual_history,
        }


def build_contingency_game(spec: ContingencySpec) -> GameProblem:
    """Stacks both hypothesis games into one game with tied ego controls

    Players are the ego (one body per branch) and one player per non-ego
    agent copy; only the ego bodies are tied, for steps before the
    branching step.
    """
    bodies = []
    player = 1
    ego_bodies = {}
    for branch, tag in enumerate(HYPOTHESES):
        game = spec.hypotheses[tag]
        scale = max(spec.beliefs[tag], BELIEF_FLOOR)
        for agent in game.agents:
            is_ego = agent.id == spec.ego_id
            if is_ego:
                ego_bodies[tag] = len(bodies)
            bodies.append(
                Body(
                    label=f"{tag}/agent-{agent.id}",
                    agent_id=agent.id,
                    branch=branch,
                    player=0 if is_ego else player,
                    initial_state=agent.initial_state,
                    features=agent.features,
                    weights=agent.weights,
                    cost_scale=scale if is_ego else 1.0,
                )
            )
            if not is_ego:
                player += 1

    ties = [
        ControlTie(ego_bodies[THETA1], ego_bodies[THETA2], k)
        for k in range(spec.branching_step)
    ]
    problem = GameProblem(bodies, spec.horizon, spec.dt, ties)
    logging.debug(
        "Contingency game: %d players, %d bodies, %d ties",
        problem.num_players,
        len(bodies),
        len(ties),
    )
    return problem


def _warm_start(
    spec: ContingencySpec,
    problem: GameProblem,
    warm_start: Optional[Mapping[str, Sequence[Trajectory]]],
):
    controls = []
    for tag in HYPOTHESES:
        game = spec.hypotheses[tag]
        if warm_start is not None and tag in warm_start:
            trajectories = list(warm_start[tag])
        else:
            trajectories = straight_line_warm_start(game)
        if len(trajectories) != game.num_agents or any(
            t.horizon != spec.horizon for t in trajectories
        ):
            logging.warning("Ignoring a warm start that does not fit the %s game", tag)
            trajectories = straight_line_warm_start(game)
        controls.extend(t.controls for t in trajectories)
    controls = np.array(controls)

    first = problem.body_index(0, spec.ego_id)
    second = problem.body_index(1, spec.ego_id)
    controls[second, : spec.branching_step] = controls[first, : spec.branching_step]

    states = np.stack(
        [
            simulate_dynamics(body.initial_state, controls[b], spec.dt).states
            for b, body in enumerate(problem.bodies)
        ]
    )
    return problem.pack(states, controls)


def solve_contingency(
    spec: ContingencySpec,
    config: Optional[NashSolverConfig] = None,
    warm_start: Optional[Mapping[str, Sequence[Trajectory]]] = None,
) -> ContingencyPlan:
    """Solves the contingency game of ``spec``

    ``warm_start`` maps hypothesis tags to trajectories of the agents of the
    corresponding game; missing entries start on straight lines.
    """
    config = config or NashSolverConfig()
    problem = build_contingency_game(spec)
    first = problem.body_index(0, spec.ego_id)
    second = problem.body_index(1, spec.ego_id)

    def project(z):
        # Shared controls are set to the mean of both branches
        states, controls, multipliers, ties = problem.unpack(z)
        controls = controls.copy()
        shared = 0.5 * (
            controls[first, : spec.branching_step]
            + controls[second, : spec.branching_step]
        )
        controls[first, : spec.branching_step] = shared
        controls[second, : spec.branching_step] = shared
        return problem.pack(states, controls, multipliers, ties)

    z0 = _warm_start(spec, problem, warm_start)
    outcome = solve_problem(
        problem, z0, config, f"contingency game (t_b={spec.branching_step})", project
    )

    states = problem.full_states(outcome.z)
    _, controls, multipliers, ties = problem.unpack(outcome.z)
    agent_ids, trajectories, branch_multipliers = {}, {}, {}
    for branch, tag in enumerate(HYPOTHESES):
        members = problem.branches[branch]
        agent_ids[tag] = tuple(problem.bodies[b].agent_id for b in members)
        trajectories[tag] = tuple(
            Trajectory(states[b], controls[b]) for b in members
        )
        branch_multipliers[tag] = multipliers[members]

    plan = ContingencyPlan(
        ego_id=spec.ego_id,
        belief=spec.belief,
        branching_step=spec.branching_step,
        agent_ids=agent_ids,
        trajectories=trajectories,
        multipliers=branch_multipliers,
        tie_multipliers=ties,
        kkt_residual_norm=outcome.residual_norm,
        iterations=outcome.iterations,
        converged=outcome.converged,
        tolerance=config.kkt_tolerance,
        residual_history=outcome.history,
    )
    logging.info(
        "Contingency game (b=%.2f, t_b=%d): %s after %d iterations (residual %.3e)",
        spec.belief,
        spec.branching_step,
        "converged" if plan.converged else "not converged",
        plan.iterations,
        plan.kkt_residual_norm,
    )
    return plan


def select_branch(plan: ContingencyPlan, revealed: str) -> np.ndarray:
    """Ego controls once the hypothesis ``revealed`` is known to hold"""
    if revealed not in HYPOTHESES:
        raise UnknownHypothesisError(revealed, HYPOTHESES)
    if not plan.converged:
        logging.warning("Selecting a branch of a non-converged contingency plan")
    return np.concatenate([plan.shared_controls, plan.branch_controls(revealed)])


def hypothesis_states(plan: ContingencyPlan, tag: str) -> np.ndarray:
    """``(M, T + 1, 4)`` states of one branch"""
    return np.stack([t.states for t in plan.trajectories[tag]]).reshape(
        len(plan.agent_ids[tag]), -1, STATE_DIM
    )
