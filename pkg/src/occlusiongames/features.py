"""Running-cost features

Every feature is a function of the joint state of the agents sharing a game
(an ``(M, 4)`` array, one ``[px, py, vx, vy]`` row per agent) and of the ego
agent's control. Derivatives are taken with respect to the stacked vector
``(joint_state.ravel(), control)`` of size ``4 M + 2``, so that the solvers can
scatter them into the KKT system without knowing the feature kind.
"""
from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, Any, ClassVar, Dict, Tuple

import numpy as np
from attrs import field, frozen

from .errors import DimensionError
from .utils import frozen_array

if TYPE_CHECKING:
    from .game import GameSpec

#: Default smoothing added to squared distances in the proximity feature [m²]
DEFAULT_PROXIMITY_EPSILON = 1e-3

Derivatives = Tuple[np.ndarray, np.ndarray]


def _check_inputs(joint_state: np.ndarray, control: np.ndarray, ego: int):
    if joint_state.ndim != 2 or joint_state.shape[1] != 4:
        raise DimensionError("joint state", "(M, 4)", joint_state.shape)
    if control.shape != (2,):
        raise DimensionError("control", (2,), control.shape)
    if not 0 <= ego < joint_state.shape[0]:
        raise DimensionError("ego index", f"< {joint_state.shape[0]}", ego)


class CostFeature(ABC):
    """Base class of all running-cost features"""

    #: Tag used in configuration files
    KIND: ClassVar[str]

    #: Whether the feature couples the ego to the other agents
    COUPLING: ClassVar[bool] = False

    REGISTRY: ClassVar[Dict[str, type]] = {}

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        CostFeature.REGISTRY[cls.KIND] = cls

    @abstractmethod
    def value(
        self, joint_state: np.ndarray, control: np.ndarray, ego: int, k: int = 0
    ) -> float:
        ...

    @abstractmethod
    def derivatives(
        self, joint_state: np.ndarray, control: np.ndarray, ego: int, k: int = 0
    ) -> Derivatives:
        """Gradient and Hessian with respect to ``(joint_state, control)``"""
        ...

    def shifted(self, offset: int) -> "CostFeature":
        """The same feature with its time index advanced by ``offset`` steps"""
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.KIND}

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "CostFeature":
        data = dict(data)
        kind = data.pop("kind")
        try:
            cls = CostFeature.REGISTRY[kind]
        except KeyError:
            raise KeyError(f"Unknown feature kind {kind!r}")
        return cls(**data)

    @staticmethod
    def _zeros(num_agents: int) -> Derivatives:
        size = 4 * num_agents + 2
        return np.zeros(size), np.zeros((size, size))


@frozen(eq=False)
class GoalFeature(CostFeature):
    """Squared distance to the goal ``‖p_ego − p_g‖²``

    The goal is either a fixed point or a sequence indexed by the time step;
    indices past the end of the sequence use its last point.
    """

    KIND = "goal"

    goal: np.ndarray = field(converter=lambda g: frozen_array(g, what="goal"))
    offset: int = 0

    def __attrs_post_init__(self):
        if self.goal.shape[-1] != 2 or self.goal.ndim not in (1, 2):
            raise DimensionError("goal", "(2,) or (L, 2)", self.goal.shape)

    def at(self, k: int) -> np.ndarray:
        if self.goal.ndim == 1:
            return self.goal
        return self.goal[min(max(k + self.offset, 0), len(self.goal) - 1)]

    def value(self, joint_state, control, ego, k=0):
        _check_inputs(joint_state, control, ego)
        delta = joint_state[ego, :2] - self.at(k)
        return float(delta @ delta)

    def derivatives(self, joint_state, control, ego, k=0):
        _check_inputs(joint_state, control, ego)
        grad, hess = self._zeros(joint_state.shape[0])
        p = slice(4 * ego, 4 * ego + 2)
        grad[p] = 2.0 * (joint_state[ego, :2] - self.at(k))
        hess[p, p] = 2.0 * np.eye(2)
        return grad, hess

    def shifted(self, offset):
        if self.goal.ndim == 1 or offset == 0:
            return self
        return GoalFeature(self.goal, self.offset + offset)

    def to_dict(self):
        return {"kind": self.KIND, "goal": self.goal, "offset": self.offset}


@frozen(eq=False)
class ProximityFeature(CostFeature):
    """Smoothed inverse squared distance to every other agent

    ``Σ_{j≠ego} 1 / (‖p_ego − p_j‖² + ε)``; ``ε`` keeps the feature finite at
    collisions.
    """

    KIND = "proximity"
    COUPLING = True

    epsilon: float = DEFAULT_PROXIMITY_EPSILON

    def __attrs_post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"proximity epsilon must be nonnegative ({self.epsilon})")

    def value(self, joint_state, control, ego, k=0):
        _check_inputs(joint_state, control, ego)
        delta = joint_state[ego, :2] - np.delete(joint_state[:, :2], ego, axis=0)
        return float(np.sum(1.0 / (np.sum(delta**2, axis=1) + self.epsilon)))

    def derivatives(self, joint_state, control, ego, k=0):
        _check_inputs(joint_state, control, ego)
        num_agents = joint_state.shape[0]
        grad, hess = self._zeros(num_agents)
        pe = slice(4 * ego, 4 * ego + 2)
        for j in range(num_agents):
            if j == ego:
                continue
            pj = slice(4 * j, 4 * j + 2)
            r = joint_state[ego, :2] - joint_state[j, :2]
            s = r @ r + self.epsilon
            g = -2.0 * r / s**2
            h = 8.0 * np.outer(r, r) / s**3 - 2.0 * np.eye(2) / s**2
            grad[pe] += g
            grad[pj] -= g
            hess[pe, pe] += h
            hess[pj, pj] += h
            hess[pe, pj] -= h
            hess[pj, pe] -= h
        return grad, hess

    def to_dict(self):
        return {"kind": self.KIND, "epsilon": self.epsilon}


@frozen(eq=False)
class EffortFeature(CostFeature):
    """Control effort ``‖u‖²``"""

    KIND = "effort"

    def value(self, joint_state, control, ego, k=0):
        _check_inputs(joint_state, control, ego)
        return float(control @ control)

    def derivatives(self, joint_state, control, ego, k=0):
        _check_inputs(joint_state, control, ego)
        grad, hess = self._zeros(joint_state.shape[0])
        grad[-2:] = 2.0 * control
        hess[-2:, -2:] = 2.0 * np.eye(2)
        return grad, hess


def _unit(direction) -> np.ndarray:
    direction = frozen_array(direction, (2,), "lane direction")
    norm = np.linalg.norm(direction)
    if norm == 0:
        raise ValueError("lane direction must be nonzero")
    return frozen_array(direction / norm, (2,), "lane direction")


@frozen(eq=False)
class LaneFeature(CostFeature):
    """Squared perpendicular distance to an infinite straight lane centre line"""

    KIND = "lane"

    point: np.ndarray = field(converter=lambda p: frozen_array(p, (2,), "lane point"))
    direction: np.ndarray = field(converter=_unit)

    @property
    def normal(self) -> np.ndarray:
        return np.array([-self.direction[1], self.direction[0]])

    def deviation(self, position: np.ndarray) -> float:
        """Signed perpendicular distance from the centre line"""
        return float(self.normal @ (position - self.point))

    def value(self, joint_state, control, ego, k=0):
        _check_inputs(joint_state, control, ego)
        return self.deviation(joint_state[ego, :2]) ** 2

    def derivatives(self, joint_state, control, ego, k=0):
        _check_inputs(joint_state, control, ego)
        grad, hess = self._zeros(joint_state.shape[0])
        p = slice(4 * ego, 4 * ego + 2)
        normal = self.normal
        grad[p] = 2.0 * self.deviation(joint_state[ego, :2]) * normal
        hess[p, p] = 2.0 * np.outer(normal, normal)
        return grad, hess

    def to_dict(self):
        return {"kind": self.KIND, "point": self.point, "direction": self.direction}


# --- Functional interface


def feature_value(
    feature: CostFeature, joint_state, control, ego: int, k: int = 0
) -> float:
    return feature.value(
        np.asarray(joint_state, dtype=float), np.asarray(control, dtype=float), ego, k
    )


def feature_derivatives(
    feature: CostFeature, joint_state, control, ego: int, k: int = 0
) -> Derivatives:
    return feature.derivatives(
        np.asarray(joint_state, dtype=float), np.asarray(control, dtype=float), ego, k
    )


def running_cost(
    spec: "GameSpec", ego: int, joint_state, joint_control, k: int
) -> float:
    """Weighted sum of the ego agent's feature values at time index ``k``

    :param ego: position of the agent in ``spec.agents``
    :param joint_state: ``(M, 4)`` states at time ``k``
    :param joint_control: ``(M, 2)`` controls driving the agents into that state
    """
    joint_state = np.asarray(joint_state, dtype=float)
    control = np.asarray(joint_control, dtype=float)[ego]
    agent = spec.agents[ego]
    return float(
        sum(
            weight * feature.value(joint_state, control, ego, k)
            for weight, feature in zip(agent.weights, agent.features)
        )
    )


def trajectory_cost(spec: "GameSpec", ego: int, states, controls) -> float:
    """Cumulative cost ``J`` of agent ``ego``

    The stage at time index ``k = 1..T`` pairs the joint state ``x_k`` with the
    controls ``u_{k-1}`` that produced it.

    :param states: ``(M, T + 1, 4)`` joint states
    :param controls: ``(M, T, 2)`` joint controls
    """
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    horizon = controls.shape[1]
    return float(
        sum(
            running_cost(spec, ego, states[:, k], controls[:, k - 1], k)
            for k in range(1, horizon + 1)
        )
    )
