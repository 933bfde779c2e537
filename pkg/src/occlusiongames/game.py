"""Data model shared by all the solvers

Agents are identified by integer ids (their index in the ground-truth world);
a game stores them in ``agents`` order, and joint arrays are agent-major: the
row ``m`` of a ``(M, ...)`` array belongs to ``spec.agents[m]``.

States are ``[px, py, vx, vy]`` rows; ``states[0]`` of a trajectory is the
initial state and ``controls[k]`` drives ``states[k]`` to ``states[k + 1]``.
"""
import logging
from typing import (
    Any,
    Dict,
    FrozenSet,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from attrs import field, frozen

from .errors import DimensionError
from .features import CostFeature
from .utils import frozen_array

#: State dimension of the planar double integrator
STATE_DIM = 4

#: Control dimension
CONTROL_DIM = 2

#: Tolerance used by `validate_trajectory`
FEASIBILITY_TOLERANCE = 1e-8

DYNAMICS_KINDS = ("double_integrator",)


@frozen(eq=False)
class AgentState:
    position: np.ndarray = field(
        converter=lambda p: frozen_array(p, (2,), "position")
    )
    velocity: np.ndarray = field(
        converter=lambda v: frozen_array(v, (2,), "velocity")
    )

    @staticmethod
    def from_array(x) -> "AgentState":
        x = frozen_array(x, (STATE_DIM,), "state")
        return AgentState(x[:2], x[2:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


@frozen(eq=False)
class ControlInput:
    acceleration: np.ndarray = field(
        converter=lambda a: frozen_array(a, (2,), "acceleration")
    )

    def as_array(self) -> np.ndarray:
        return np.array(self.acceleration)


def _states(value) -> np.ndarray:
    array = np.asarray(value, dtype=float).reshape(-1, STATE_DIM)
    return frozen_array(array, (None, STATE_DIM), "trajectory states")


def _controls(value) -> np.ndarray:
    array = np.asarray(value, dtype=float).reshape(-1, CONTROL_DIM)
    return frozen_array(array, (None, CONTROL_DIM), "trajectory controls")


@frozen(eq=False)
class Trajectory:
    """States ``(T + 1, 4)`` and controls ``(T, 2)`` of one agent"""

    states: np.ndarray = field(converter=_states)
    controls: np.ndarray = field(converter=_controls)

    def __attrs_post_init__(self):
        if len(self.states) != len(self.controls) + 1:
            raise DimensionError(
                "trajectory states", len(self.controls) + 1, len(self.states)
            )

    @property
    def horizon(self) -> int:
        return len(self.controls)

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    @property
    def velocities(self) -> np.ndarray:
        return self.states[:, 2:]

    def state(self, k: int) -> AgentState:
        return AgentState.from_array(self.states[k])

    def control(self, k: int) -> ControlInput:
        return ControlInput(self.controls[k])

    def to_dict(self):
        return {"states": self.states, "controls": self.controls}

    @staticmethod
    def from_dict(data) -> "Trajectory":
        return Trajectory(data["states"], data["controls"])


@frozen(eq=False)
class AgentSpec:
    """One agent of a game: its initial state and weighted cost features"""

    id: int
    initial_state: np.ndarray = field(
        converter=lambda x: frozen_array(x, (STATE_DIM,), "initial state")
    )
    features: Tuple[CostFeature, ...] = field(converter=tuple)
    weights: np.ndarray = field(converter=lambda w: frozen_array(w, (None,), "weights"))

    def __attrs_post_init__(self):
        if len(self.weights) != len(self.features):
            raise DimensionError(
                f"agent {self.id} weights", len(self.features), len(self.weights)
            )

    def evolve(self, **changes) -> "AgentSpec":
        values = {
            "id": self.id,
            "initial_state": self.initial_state,
            "features": self.features,
            "weights": self.weights,
        }
        values.update(changes)
        return AgentSpec(**values)

    def to_dict(self):
        return {
            "id": self.id,
            "initial_state": self.initial_state,
            "features": [feature.to_dict() for feature in self.features],
            "weights": self.weights,
        }


@frozen(eq=False)
class GameSpec:
    """A finite-horizon game between agents sharing dynamics, horizon and ``dt``

    Construction does not check the domain invariants (positivity of the
    weights, horizon...): use `validate_game_spec` which reports all of them.
    """

    dt: float = field(converter=float)
    horizon: int = field(converter=int)
    agents: Tuple[AgentSpec, ...] = field(converter=tuple)
    dynamics: str = "double_integrator"

    @property
    def num_agents(self) -> int:
        return len(self.agents)

    @property
    def agent_ids(self) -> Tuple[int, ...]:
        return tuple(agent.id for agent in self.agents)

    @property
    def initial_states(self) -> np.ndarray:
        """Joint initial state ``(M, 4)``"""
        return np.array([agent.initial_state for agent in self.agents]).reshape(
            -1, STATE_DIM
        )

    def index(self, agent_id: int) -> int:
        for ix, agent in enumerate(self.agents):
            if agent.id == agent_id:
                return ix
        raise KeyError(f"No agent with id {agent_id} in the game")

    def agent(self, agent_id: int) -> AgentSpec:
        return self.agents[self.index(agent_id)]

    def _evolve(self, **changes) -> "GameSpec":
        values = {
            "dt": self.dt,
            "horizon": self.horizon,
            "agents": self.agents,
            "dynamics": self.dynamics,
        }
        values.update(changes)
        return GameSpec(**values)

    def subgame(self, agent_ids: Iterable[int]) -> "GameSpec":
        """The game restricted to some agents (kept in this game's order)"""
        agent_ids = set(agent_ids)
        unknown = agent_ids - set(self.agent_ids)
        if unknown:
            raise KeyError(f"Unknown agents {sorted(unknown)}")
        return self._evolve(
            agents=[agent for agent in self.agents if agent.id in agent_ids]
        )

    def with_weights(self, weights: Mapping[int, Any]) -> "GameSpec":
        return self._evolve(
            agents=[
                agent.evolve(weights=weights[agent.id])
                if agent.id in weights
                else agent
                for agent in self.agents
            ]
        )

    def with_initial_states(
        self, states: Union[Mapping[int, Any], np.ndarray]
    ) -> "GameSpec":
        """Replace initial states, given by agent id or as a joint ``(M, 4)`` array"""
        if not isinstance(states, Mapping):
            states = np.asarray(states, dtype=float)
            if states.shape != (self.num_agents, STATE_DIM):
                raise DimensionError(
                    "joint initial state", (self.num_agents, STATE_DIM), states.shape
                )
            states = {agent.id: states[ix] for ix, agent in enumerate(self.agents)}

        return self._evolve(
            agents=[
                agent.evolve(initial_state=states[agent.id])
                if agent.id in states
                else agent
                for agent in self.agents
            ]
        )

    def with_horizon(self, horizon: int) -> "GameSpec":
        return self._evolve(horizon=horizon)

    def advanced(self, offset: int) -> "GameSpec":
        """The game whose time index 0 is this game's index ``offset``

        Only time-varying features (goal sequences) are affected.
        """
        if offset == 0:
            return self
        return self._evolve(
            agents=[
                agent.evolve(
                    features=[feature.shifted(offset) for feature in agent.features]
                )
                for agent in self.agents
            ]
        )

    def to_dict(self):
        return {
            "dt": self.dt,
            "horizon": self.horizon,
            "dynamics": self.dynamics,
            "agents": [agent.to_dict() for agent in self.agents],
        }

    @staticmethod
    def from_dict(data) -> "GameSpec":
        return GameSpec(
            dt=data["dt"],
            horizon=data["horizon"],
            dynamics=data.get("dynamics", "double_integrator"),
            agents=[
                AgentSpec(
                    id=agent["id"],
                    initial_state=agent["initial_state"],
                    features=[CostFeature.from_dict(f) for f in agent["features"]],
                    weights=agent["weights"],
                )
                for agent in data["agents"]
            ],
        )


@frozen(eq=False)
class VisibilityModel:
    """Who sees whom

    ``visible_set`` is the set of agents observed by the estimating party
    (``observer`` when it is one of the agents); ``per_observer`` maps each
    agent to the set of agents it sees.
    """

    agents: FrozenSet[int] = field(converter=frozenset)
    visible_set: FrozenSet[int] = field(converter=frozenset)
    per_observer: Mapping[int, FrozenSet[int]] = field(
        converter=lambda m: {key: frozenset(value) for key, value in m.items()}
    )
    observer: Optional[int] = None

    def __attrs_post_init__(self):
        if not self.visible_set <= self.agents:
            raise ValueError(
                f"visible agents {sorted(self.visible_set - self.agents)} are not"
                " in the game"
            )
        for agent, seen in self.per_observer.items():
            if agent not in seen:
                raise ValueError(f"agent {agent} must see itself")
            if not seen <= self.agents:
                raise ValueError(f"agent {agent} sees unknown agents")
        if self.observer is not None and self.observer not in self.visible_set:
            raise ValueError(f"observer {self.observer} must be visible")

    @property
    def occluded_set(self) -> FrozenSet[int]:
        return self.agents - self.visible_set

    def visible_to(self, agent: int) -> FrozenSet[int]:
        return self.per_observer.get(agent, self.agents)

    def for_observer(self, agent: int) -> "VisibilityModel":
        """The same visibility, seen from ``agent``"""
        return VisibilityModel(
            self.agents, self.visible_to(agent), self.per_observer, observer=agent
        )

    def restricted(self, agents: Iterable[int]) -> "VisibilityModel":
        agents = frozenset(agents)
        return VisibilityModel(
            agents,
            self.visible_set & agents,
            {
                key: value & agents
                for key, value in self.per_observer.items()
                if key in agents
            },
            observer=self.observer if self.observer in agents else None,
        )

    @staticmethod
    def full(agents: Iterable[int]) -> "VisibilityModel":
        agents = frozenset(agents)
        return VisibilityModel(agents, agents, {agent: agents for agent in agents})

    @staticmethod
    def from_matrix(
        agent_ids: Sequence[int], matrix, observer: Optional[int] = None
    ) -> "VisibilityModel":
        """Builds the model from a boolean ``matrix[i, j]`` (``i`` sees ``j``)"""
        matrix = np.asarray(matrix, dtype=bool)
        per_observer = {
            i: {j for col, j in enumerate(agent_ids) if matrix[row, col]}
            for row, i in enumerate(agent_ids)
        }
        visible = per_observer[observer] if observer is not None else agent_ids
        return VisibilityModel(agent_ids, visible, per_observer, observer=observer)

    def matrix(self, agent_ids: Sequence[int]) -> np.ndarray:
        return np.array(
            [[j in self.visible_to(i) for j in agent_ids] for i in agent_ids]
        )

    def to_dict(self):
        return {
            "agents": self.agents,
            "visible": self.visible_set,
            "observer": self.observer,
            "per_observer": {
                str(key): value for key, value in sorted(self.per_observer.items())
            },
        }


@frozen(eq=False)
class VisibilitySchedule:
    """Visibility before and after the occlusions are lifted at ``reveal_step``"""

    before: VisibilityModel
    after: VisibilityModel
    reveal_step: int

    def at(self, k: int) -> VisibilityModel:
        return self.before if k < self.reveal_step else self.after

    @staticmethod
    def static(visibility: VisibilityModel) -> "VisibilitySchedule":
        return VisibilitySchedule(visibility, visibility, 0)

    def to_dict(self):
        return {
            "before": self.before,
            "after": self.after,
            "reveal_step": self.reveal_step,
        }


@frozen(eq=False)
class SolverResult:
    """Outcome of a Nash solve

    ``multipliers[m, k]`` is the costate of the dynamics constraint linking
    ``states[k]`` and ``states[k + 1]`` of agent ``m``. ``kkt_residual_norm``
    is the infinity norm of the residual at ``trajectories``;
    ``residual_history`` holds the infinity norms of the iterates of the
    last solve and ends with ``kkt_residual_norm``.
    """

    agent_ids: Tuple[int, ...] = field(converter=tuple)
    trajectories: Tuple[Trajectory, ...] = field(converter=tuple)
    multipliers: np.ndarray = field(
        converter=lambda m: frozen_array(m, (None, None, STATE_DIM), "multipliers")
    )
    kkt_residual_norm: float
    iterations: int
    converged: bool
    tolerance: float
    residual_history: Tuple[float, ...] = field(converter=tuple, default=())

    def __attrs_post_init__(self):
        if self.converged and not self.kkt_residual_norm <= self.tolerance:
            raise ValueError(
                f"converged result with residual {self.kkt_residual_norm}"
                f" above tolerance {self.tolerance}"
            )

    @property
    def states(self) -> np.ndarray:
        return np.stack([t.states for t in self.trajectories])

    @property
    def controls(self) -> np.ndarray:
        return np.stack([t.controls for t in self.trajectories])

    def trajectory(self, agent_id: int) -> Trajectory:
        return self.trajectories[self.agent_ids.index(agent_id)]

    def as_mapping(self) -> Dict[int, Trajectory]:
        return dict(zip(self.agent_ids, self.trajectories))

    def to_dict(self):
        return {
            "schema": "occlusiongames.solver-result/1",
            "agent_ids": self.agent_ids,
            "trajectories": list(self.trajectories),
            "multipliers": self.multipliers,
            "kkt_residual_norm": self.kkt_residual_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "tolerance": self.tolerance,
            "residual_history": self.residual_history,
        }


# --- Checks


def validate_game_spec(spec: GameSpec) -> List[str]:
    """Lists the violated invariants of a game (empty when valid)"""
    problems = []
    if spec.horizon <= 0:
        problems.append("horizon must be positive")
    if not spec.dt > 0:
        problems.append("dt must be positive")
    if spec.dynamics not in DYNAMICS_KINDS:
        problems.append(f"unknown dynamics {spec.dynamics!r}")
    if spec.num_agents == 0:
        problems.append("game must have at least one agent")

    seen = set()
    for ix, agent in enumerate(spec.agents):
        if agent.id in seen:
            problems.append(f"agent {ix}: duplicate id {agent.id}")
        seen.add(agent.id)

        for l, weight in enumerate(agent.weights):
            if weight < 0:
                problems.append(f"agent {ix}: negative weight at index {l}")
        if not np.any(agent.weights > 0):
            problems.append(f"agent {ix}: no strictly positive weight")

    if problems:
        logging.debug("Invalid game: %s", problems)
    return problems


def trajectory_feasibility_residual(traj: Trajectory, spec: GameSpec) -> float:
    """Largest one-step dynamics defect ``‖x_{k+1} − f(x_k, u_k)‖∞``"""
    from .dynamics import step_dynamics

    if traj.horizon != spec.horizon:
        raise DimensionError("trajectory controls", spec.horizon, traj.horizon)

    residual = 0.0
    for k in range(traj.horizon):
        predicted = step_dynamics(traj.states[k], traj.controls[k], spec.dt)
        residual = max(residual, float(np.max(np.abs(traj.states[k + 1] - predicted))))
    return residual


def validate_trajectory(
    traj: Trajectory, spec: GameSpec, tolerance: float = FEASIBILITY_TOLERANCE
) -> bool:
    return trajectory_feasibility_residual(traj, spec) <= tolerance
