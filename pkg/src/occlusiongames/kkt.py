"""Stacked first-order conditions of open-loop games

A `GameProblem` is a set of *bodies*: a body is one copy of an agent living
in one branch of the game, with its own states, controls and costates. Bodies
of the same branch interact through their cost features; bodies of distinct
branches only interact through control ties (``u^a_k = u^b_k``), which is
how the contingency game shares the ego controls before the branching time.
A plain Nash game is a single-branch problem with one body per agent.

The unknown vector ``z`` has one block of size ``10 T`` per body::

    x_1 .. x_T (4 T) | u_0 .. u_{T-1} (2 T) | λ_0 .. λ_{T-1} (4 T)

followed by the tie multipliers (2 per tie). Residual rows use the same
layout: state stationarity, control stationarity, then the dynamics defects
``x_{k+1} − A x_k − B u_k`` (with ``x_0`` fixed), and finally the ties.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from attrs import define, field, frozen

from .dynamics import dynamics_jacobians
from .errors import DimensionError
from .features import CostFeature
from .game import CONTROL_DIM, STATE_DIM, GameSpec
from .utils import frozen_array

BLOCK_PER_STEP = 2 * STATE_DIM + CONTROL_DIM


@frozen(eq=False)
class Body:
    """One agent copy in one branch of a stacked game

    ``cost_scale`` multiplies the cost of the body; the contingency game uses
    it to weight each branch of the ego player by its belief.
    """

    label: str
    agent_id: int
    branch: int
    player: int
    initial_state: np.ndarray = field(
        converter=lambda x: frozen_array(x, (STATE_DIM,), "initial state")
    )
    features: Tuple[CostFeature, ...] = field(converter=tuple)
    weights: np.ndarray = field(converter=lambda w: frozen_array(w, (None,), "weights"))
    cost_scale: float = 1.0


@frozen
class ControlTie:
    """Equality of the controls of two bodies at one time step"""

    first: int
    second: int
    step: int


@define
class KKTEvaluation:
    residual: np.ndarray
    jacobian: Optional[sp.csc_matrix] = None
    #: Derivatives with respect to the (stacked) weights of the bodies
    weight_jacobian: Optional[sp.csc_matrix] = None
    #: Derivatives with respect to the (stacked) initial states of the bodies
    initial_state_jacobian: Optional[sp.csc_matrix] = None


class _Triplets:
    """Accumulates dense blocks of a sparse matrix"""

    def __init__(self):
        self.rows: List[np.ndarray] = []
        self.cols: List[np.ndarray] = []
        self.values: List[np.ndarray] = []

    def add(self, row: int, col: int, block):
        block = np.atleast_2d(block)
        ii, jj = np.indices(block.shape)
        self.rows.append(row + ii.ravel())
        self.cols.append(col + jj.ravel())
        self.values.append(block.ravel())

    def matrix(self, shape) -> sp.csc_matrix:
        if not self.values:
            return sp.csc_matrix(shape)
        return sp.coo_matrix(
            (
                np.concatenate(self.values),
                (np.concatenate(self.rows), np.concatenate(self.cols)),
            ),
            shape=shape,
        ).tocsc()


class GameProblem:
    def __init__(
        self,
        bodies: Sequence[Body],
        horizon: int,
        dt: float,
        ties: Sequence[ControlTie] = (),
    ):
        if horizon <= 0:
            raise ValueError(f"horizon must be positive (got {horizon})")
        self.bodies = tuple(bodies)
        self.ties = tuple(ties)
        self.horizon = horizon
        self.dt = dt
        self.A, self.B = dynamics_jacobians(dt)
        self.block = BLOCK_PER_STEP * horizon

        self.branches: Dict[int, List[int]] = {}
        for ix, body in enumerate(self.bodies):
            self.branches.setdefault(body.branch, []).append(ix)
        self._local = {
            ix: members.index(ix)
            for members in self.branches.values()
            for ix in members
        }

        for tie in self.ties:
            if not 0 <= tie.step < horizon:
                raise DimensionError("tie step", f"< {horizon}", tie.step)
            first, second = self.bodies[tie.first], self.bodies[tie.second]
            if first.player != second.player or first.branch == second.branch:
                raise ValueError(
                    f"tie between {first.label} and {second.label} must link"
                    " one player across two branches"
                )

        self.weight_offsets = np.cumsum(
            [0] + [len(body.weights) for body in self.bodies]
        )
        self.size = self.block * len(self.bodies) + CONTROL_DIM * len(self.ties)

    @staticmethod
    def from_game(spec: GameSpec) -> "GameProblem":
        bodies = [
            Body(
                label=f"agent-{agent.id}",
                agent_id=agent.id,
                branch=0,
                player=ix,
                initial_state=agent.initial_state,
                features=agent.features,
                weights=agent.weights,
            )
            for ix, agent in enumerate(spec.agents)
        ]
        return GameProblem(bodies, spec.horizon, spec.dt)

    @property
    def num_players(self) -> int:
        return len({body.player for body in self.bodies})

    @property
    def num_weights(self) -> int:
        return int(self.weight_offsets[-1])

    def body_index(self, branch: int, agent_id: int) -> int:
        for ix in self.branches.get(branch, ()):
            if self.bodies[ix].agent_id == agent_id:
                return ix
        raise KeyError(f"No body for agent {agent_id} in branch {branch}")

    # --- Layout

    def x_offset(self, body: int, j: int) -> int:
        """Offset of ``x_{j+1}``"""
        return body * self.block + STATE_DIM * j

    def u_offset(self, body: int, j: int) -> int:
        return body * self.block + STATE_DIM * self.horizon + CONTROL_DIM * j

    def lambda_offset(self, body: int, j: int) -> int:
        return (
            body * self.block
            + (STATE_DIM + CONTROL_DIM) * self.horizon
            + STATE_DIM * j
        )

    def tie_offset(self, tie: int) -> int:
        return self.block * len(self.bodies) + CONTROL_DIM * tie

    def pack(self, states, controls, multipliers=None, tie_multipliers=None):
        """Builds ``z`` from ``(B, T + 1, 4)`` states (or ``(B, T, 4)`` without
        the initial states), ``(B, T, 2)`` controls and ``(B, T, 4)``
        multipliers (zero when missing)"""
        num_bodies, T = len(self.bodies), self.horizon
        states = np.asarray(states, dtype=float)
        if states.shape == (num_bodies, T + 1, STATE_DIM):
            states = states[:, 1:]
        if states.shape != (num_bodies, T, STATE_DIM):
            raise DimensionError("states", (num_bodies, T + 1, STATE_DIM), states.shape)
        controls = np.asarray(controls, dtype=float)
        if controls.shape != (num_bodies, T, CONTROL_DIM):
            raise DimensionError(
                "controls", (num_bodies, T, CONTROL_DIM), controls.shape
            )
        if multipliers is None:
            multipliers = np.zeros((num_bodies, T, STATE_DIM))
        multipliers = np.asarray(multipliers, dtype=float)
        if multipliers.shape != (num_bodies, T, STATE_DIM):
            raise DimensionError(
                "multipliers", (num_bodies, T, STATE_DIM), multipliers.shape
            )
        if tie_multipliers is None:
            tie_multipliers = np.zeros((len(self.ties), CONTROL_DIM))

        blocks = [
            np.concatenate(
                [states[b].ravel(), controls[b].ravel(), multipliers[b].ravel()]
            )
            for b in range(num_bodies)
        ]
        blocks.append(np.asarray(tie_multipliers, dtype=float).ravel())
        return np.concatenate(blocks)

    def unpack(self, z):
        """Returns ``(x_1..T, u, λ, μ)`` arrays of shapes ``(B, T, 4)``,
        ``(B, T, 2)``, ``(B, T, 4)`` and ``(ties, 2)``"""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.size,):
            raise DimensionError("KKT vector", (self.size,), z.shape)
        num_bodies, T = len(self.bodies), self.horizon
        blocks = z[: self.block * num_bodies].reshape(num_bodies, self.block)
        states = blocks[:, : STATE_DIM * T].reshape(num_bodies, T, STATE_DIM)
        controls = blocks[:, STATE_DIM * T : (STATE_DIM + CONTROL_DIM) * T].reshape(
            num_bodies, T, CONTROL_DIM
        )
        multipliers = blocks[:, (STATE_DIM + CONTROL_DIM) * T :].reshape(
            num_bodies, T, STATE_DIM
        )
        ties = z[self.block * num_bodies :].reshape(-1, CONTROL_DIM)
        return states, controls, multipliers, ties

    def initial_states(self, initial_states=None) -> np.ndarray:
        if initial_states is None:
            return np.array([body.initial_state for body in self.bodies])
        initial_states = np.asarray(initial_states, dtype=float)
        if initial_states.shape != (len(self.bodies), STATE_DIM):
            raise DimensionError(
                "initial states", (len(self.bodies), STATE_DIM), initial_states.shape
            )
        return initial_states

    def full_states(self, z, initial_states=None) -> np.ndarray:
        """``(B, T + 1, 4)`` states including the initial ones"""
        states = self.unpack(z)[0]
        x0 = self.initial_states(initial_states)
        return np.concatenate([x0[:, None, :], states], axis=1)

    def row_scale(self) -> Optional[np.ndarray]:
        """Per-row factors undoing the ``cost_scale`` of the stationarity rows

        Returns None when every body has a unit cost scale.
        """
        if all(body.cost_scale == 1.0 for body in self.bodies):
            return None
        scale = np.ones(self.size)
        stationarity = (STATE_DIM + CONTROL_DIM) * self.horizon
        for b, body in enumerate(self.bodies):
            start = b * self.block
            scale[start : start + stationarity] = 1.0 / body.cost_scale
        return scale

    def coupling_weights(self, factor: float) -> Optional[List[np.ndarray]]:
        """Body weights with the coupling features scaled by ``factor``"""
        if factor == 1.0:
            return None
        return [
            np.where(
                [feature.COUPLING for feature in body.features],
                factor * body.weights,
                body.weights,
            )
            for body in self.bodies
        ]

    @property
    def coupled(self) -> bool:
        return any(
            feature.COUPLING and len(self.branches[body.branch]) > 1
            for body in self.bodies
            for feature in body.features
        )

    def _weights(self, weights) -> List[np.ndarray]:
        if weights is None:
            return [body.weights for body in self.bodies]
        weights = [np.asarray(w, dtype=float) for w in weights]
        for body, w in zip(self.bodies, weights):
            if w.shape != body.weights.shape:
                raise DimensionError(
                    f"{body.label} weights", body.weights.shape, w.shape
                )
        return weights

    # --- Evaluation

    def residual(self, z, initial_states=None, weights=None) -> np.ndarray:
        return self.evaluate(z, initial_states, weights, jacobian=False).residual

    def linearize(self, z, initial_states=None, weights=None):
        evaluation = self.evaluate(z, initial_states, weights)
        return evaluation.residual, evaluation.jacobian

    def evaluate(
        self,
        z,
        initial_states=None,
        weights=None,
        jacobian: bool = True,
        sensitivities: bool = False,
    ) -> KKTEvaluation:
        """Residual of the stacked first-order conditions and its derivatives

        With ``sensitivities``, also returns the derivatives with respect to
        the weights and the initial states (used by the inverse game).
        """
        X, U, L, MU = self.unpack(z)
        x0 = self.initial_states(initial_states)
        W = self._weights(weights)
        A, B, T = self.A, self.B, self.horizon
        eye = np.eye(STATE_DIM)

        G = np.zeros(self.size)
        J = _Triplets()
        dW = _Triplets()
        dX0 = _Triplets()

        for b, body in enumerate(self.bodies):
            members = self.branches[body.branch]
            ego = self._local[b]
            own = slice(STATE_DIM * ego, STATE_DIM * (ego + 1))
            size = STATE_DIM * len(members) + CONTROL_DIM

            for j in range(T):
                joint = X[members, j]
                control = U[b, j]
                grad, hess = np.zeros(size), np.zeros((size, size))
                for l, (weight, feature) in enumerate(zip(W[b], body.features)):
                    g, h = feature.derivatives(joint, control, ego, j + 1)
                    grad += weight * g
                    hess += weight * h
                    if sensitivities:
                        column = self.weight_offsets[b] + l
                        dW.add(
                            self.x_offset(b, j), column, body.cost_scale * g[own, None]
                        )
                        dW.add(
                            self.u_offset(b, j),
                            column,
                            body.cost_scale * g[-CONTROL_DIM:, None],
                        )
                grad *= body.cost_scale
                hess *= body.cost_scale

                rx = self.x_offset(b, j)
                ru = self.u_offset(b, j)
                rd = self.lambda_offset(b, j)
                G[rx : rx + STATE_DIM] = grad[own] + L[b, j]
                if j + 1 < T:
                    G[rx : rx + STATE_DIM] -= A.T @ L[b, j + 1]
                G[ru : ru + CONTROL_DIM] = grad[-CONTROL_DIM:] - B.T @ L[b, j]
                previous = x0[b] if j == 0 else X[b, j - 1]
                G[rd : rd + STATE_DIM] = X[b, j] - A @ previous - B @ U[b, j]

                if jacobian:
                    for c_local, c in enumerate(members):
                        cs = slice(STATE_DIM * c_local, STATE_DIM * (c_local + 1))
                        J.add(rx, self.x_offset(c, j), hess[own, cs])
                        J.add(ru, self.x_offset(c, j), hess[-CONTROL_DIM:, cs])
                    J.add(rx, self.u_offset(b, j), hess[own, -CONTROL_DIM:])
                    J.add(ru, self.u_offset(b, j), hess[-CONTROL_DIM:, -CONTROL_DIM:])
                    J.add(rx, self.lambda_offset(b, j), eye)
                    if j + 1 < T:
                        J.add(rx, self.lambda_offset(b, j + 1), -A.T)
                    J.add(ru, self.lambda_offset(b, j), -B.T)
                    J.add(rd, self.x_offset(b, j), eye)
                    if j > 0:
                        J.add(rd, self.x_offset(b, j - 1), -A)
                    J.add(rd, self.u_offset(b, j), -B)

                if sensitivities and j == 0:
                    dX0.add(rd, STATE_DIM * b, -A)

        for t, tie in enumerate(self.ties):
            r = self.tie_offset(t)
            u1 = self.u_offset(tie.first, tie.step)
            u2 = self.u_offset(tie.second, tie.step)
            G[u1 : u1 + CONTROL_DIM] += MU[t]
            G[u2 : u2 + CONTROL_DIM] -= MU[t]
            G[r : r + CONTROL_DIM] = U[tie.first, tie.step] - U[tie.second, tie.step]
            if jacobian:
                identity = np.eye(CONTROL_DIM)
                J.add(u1, r, identity)
                J.add(u2, r, -identity)
                J.add(r, u1, identity)
                J.add(r, u2, -identity)

        evaluation = KKTEvaluation(G)
        if jacobian:
            evaluation.jacobian = J.matrix((self.size, self.size))
        if sensitivities:
            evaluation.weight_jacobian = dW.matrix((self.size, self.num_weights))
            evaluation.initial_state_jacobian = dX0.matrix(
                (self.size, STATE_DIM * len(self.bodies))
            )
        logging.debug(
            "KKT evaluation: %d bodies, residual %.3e",
            len(self.bodies),
            np.abs(G).max(),
        )
        return evaluation
