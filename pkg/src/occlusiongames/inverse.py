"""Occlusion-aware inverse games

Given noisy positions of the visible agents, the estimator looks for cost
weights, initial states and trajectories of *all* the agents of a template
game (visible and occluded) such that the trajectories are a Nash
equilibrium of the estimated game and the visible agents' positions are as
close as possible to the observations.

The equilibrium conditions are imposed as equality constraints
``G(z; w, x_0) = 0`` on a least-squares problem, which is solved with an
augmented Lagrangian: each outer iteration minimises

    ½‖r(z, x_0)‖² + ½‖√μ G − y / √μ‖²

with Levenberg-Marquardt steps, then updates ``y ← y − μ G`` and possibly
``μ``. Weights live on the simplex through ``w = softplus(ρ) / Σ softplus(ρ)``.
"""
import logging
from typing import Any, Dict, Mapping, Optional, Tuple

import attrs
import numpy as np
import scipy.sparse as sp
from attrs import field, frozen
from scipy.ndimage import uniform_filter1d
from scipy.sparse.linalg import spsolve
from scipy.special import expit

from .dynamics import shift_trajectory, simulate_dynamics, straight_line_warm_start
from .errors import ObservationError
from .features import ProximityFeature
from .game import (
    STATE_DIM,
    GameSpec,
    SolverResult,
    Trajectory,
    VisibilityModel,
)
from .kkt import GameProblem
from .nash import NashSolverConfig, solve_problem
from .utils import config_hash, frozen_array

#: Softplus preimage of 1 (uniform weights)
UNIFORM_RHO = float(np.log(np.e - 1.0))


def _positive(instance, attribute, value):
    if not value > 0:
        raise ValueError(f"{attribute.name} must be positive (got {value})")


def _at_least_one(instance, attribute, value):
    if value < 1:
        raise ValueError(f"{attribute.name} must be at least 1 (got {value})")


@frozen
class EstimatorConfig:
    constraint_tol: float = field(default=1e-6, validator=_positive)
    stationarity_tol: float = field(default=1e-6, validator=_positive)
    max_outer: int = field(default=50, validator=_at_least_one)
    max_inner: int = field(default=30, validator=_at_least_one)
    initial_penalty: float = field(default=1.0, validator=_positive)
    penalty_growth: float = field(default=10.0, validator=_positive)
    max_penalty: float = field(default=1e8, validator=_positive)
    levenberg: float = field(default=1e-3, validator=_positive)
    smoothing_window: int = field(default=3, validator=_at_least_one)
    cold_start: bool = False
    restore_feasibility: bool = True

    def to_dict(self):
        return attrs.asdict(self)


def _check_positions(positions):
    return {
        int(key): frozen_array(value, (None, 2), f"observations of agent {key}")
        for key, value in positions.items()
    }


@frozen(eq=False)
class ObservationSequence:
    """Position measurements ``y_k = p_k + n_k`` of the visible agents

    ``positions[i]`` holds the measurements of agent ``i`` at the time
    indices ``start .. start + N``.
    """

    positions: Mapping[int, np.ndarray] = field(converter=_check_positions)
    sigma: float = field(converter=float)
    visibility: VisibilityModel
    seed: Optional[int] = None
    start: int = 0

    def __attrs_post_init__(self):
        if self.sigma < 0:
            raise ObservationError(f"noise level must be nonnegative ({self.sigma})")
        if set(self.positions) != set(self.visibility.visible_set):
            raise ObservationError(
                f"observed agents {sorted(self.positions)} differ from the"
                f" visible agents {sorted(self.visibility.visible_set)}"
            )
        lengths = {len(value) for value in self.positions.values()}
        if len(lengths) > 1:
            raise ObservationError(f"observation sequences have lengths {lengths}")

    @property
    def agent_ids(self) -> Tuple[int, ...]:
        return tuple(sorted(self.positions))

    @property
    def num_steps(self) -> int:
        """Number of steps ``N`` between the first and last observation"""
        if not self.positions:
            return -1
        return len(next(iter(self.positions.values()))) - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.start, self.start + self.num_steps + 1)

    def window(self, first: int, last: int) -> "ObservationSequence":
        """Observations for the time indices ``first..last`` (inclusive)"""
        if first < self.start or last > self.start + self.num_steps or first > last:
            raise ObservationError(
                f"window [{first}, {last}] outside of observed"
                f" [{self.start}, {self.start + self.num_steps}]"
            )
        return attrs.evolve(
            self,
            positions={
                key: value[first - self.start : last - self.start + 1]
                for key, value in self.positions.items()
            },
            start=first,
        )

    def restricted(self, agent_ids) -> "ObservationSequence":
        agent_ids = set(agent_ids)
        visibility = self.visibility.restricted(self.visibility.agents & agent_ids)
        return attrs.evolve(
            self,
            positions={k: v for k, v in self.positions.items() if k in agent_ids},
            visibility=visibility,
        )

    def rows(self):
        """``(seed, agent_id, k, y_x, y_y)`` rows, ordered by agent then time"""
        for agent_id in self.agent_ids:
            for k, (y_x, y_y) in zip(self.times, self.positions[agent_id]):
                yield self.seed, agent_id, int(k), float(y_x), float(y_y)

    def to_dict(self):
        return {
            "sigma": self.sigma,
            "seed": self.seed,
            "start": self.start,
            "visibility": self.visibility,
            "positions": {str(k): v for k, v in sorted(self.positions.items())},
        }


@frozen(eq=False)
class EstimateResult:
    """Estimated game: normalized weights, trajectories and costates

    ``objective`` is the mean squared position error over the observed
    (agent, step) entries; ``occluded_ids`` lists the agents estimated
    without any observation.
    """

    agent_ids: Tuple[int, ...] = field(converter=tuple)
    weights: Mapping[int, np.ndarray]
    trajectories: Mapping[int, Trajectory]
    multipliers: Mapping[int, np.ndarray]
    objective: float
    kkt_constraint_violation: float
    stationarity: float
    converged: bool
    iterations: int
    visible_ids: Tuple[int, ...] = field(converter=tuple)
    occluded_ids: Tuple[int, ...] = field(converter=tuple)
    tolerance: float = 1e-6
    start: int = 0
    ignorant: bool = False
    provenance: Mapping[str, Any] = field(factory=dict)

    def __attrs_post_init__(self):
        if self.converged and not self.kkt_constraint_violation <= self.tolerance:
            raise ValueError("converged estimate violates the KKT constraints")

    def estimated_game(self, template: GameSpec) -> GameSpec:
        """The template restricted to the estimated agents, with the estimated
        weights and initial states"""
        return (
            template.subgame(self.agent_ids)
            .with_weights(self.weights)
            .with_initial_states(
                {key: traj.states[0] for key, traj in self.trajectories.items()}
            )
        )

    def final_states(self) -> Dict[int, np.ndarray]:
        return {key: traj.states[-1] for key, traj in self.trajectories.items()}

    def to_dict(self):
        return {
            "schema": "occlusiongames.estimate/1",
            "agent_ids": self.agent_ids,
            "visible_ids": self.visible_ids,
            "occluded_ids": self.occluded_ids,
            "ignorant": self.ignorant,
            "start": self.start,
            "weights": {str(k): v for k, v in self.weights.items()},
            "trajectories": {str(k): v for k, v in self.trajectories.items()},
            "objective": self.objective,
            "kkt_constraint_violation": self.kkt_constraint_violation,
            "stationarity": self.stationarity,
            "converged": self.converged,
            "iterations": self.iterations,
            "provenance": dict(self.provenance),
        }


def simulate_observations(
    spec: GameSpec,
    truth,
    visibility: VisibilityModel,
    sigma: float,
    seed: Optional[int] = None,
    start: int = 0,
) -> ObservationSequence:
    """Noisy positions ``p + N(0, σ² I)`` of the visible agents

    :param truth: a `SolverResult` or trajectories in the order of ``spec``
    """
    if sigma < 0:
        raise ObservationError(f"noise level must be nonnegative ({sigma})")
    if isinstance(truth, SolverResult):
        truth = truth.trajectories
    truth = dict(zip(spec.agent_ids, truth))

    rng = np.random.default_rng(seed)
    positions = {}
    for agent_id in sorted(visibility.visible_set):
        exact = truth[agent_id].positions
        positions[agent_id] = exact + sigma * rng.standard_normal(exact.shape)
    return ObservationSequence(positions, sigma, visibility, seed=seed, start=start)


# --- Estimation


def _softplus_weights(rho: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized weights and their Jacobian with respect to ``rho``"""
    s = np.logaddexp(0.0, rho)
    total = s.sum()
    w = s / total
    jacobian = (np.eye(len(rho)) - np.outer(w, np.ones(len(rho)))) * expit(rho) / total
    return w, jacobian


def _softplus_preimage(w) -> np.ndarray:
    w = np.maximum(np.asarray(w, dtype=float), 1e-12)
    return np.log(np.expm1(w))


def _fit_horizon(trajectory: Trajectory, horizon: int, dt: float) -> Trajectory:
    controls = np.zeros((horizon, 2))
    n = min(horizon, trajectory.horizon)
    controls[:n] = trajectory.controls[:n]
    return simulate_dynamics(trajectory.states[0], controls, dt)


class _Estimator:
    """Holds the variable layout ``[ρ (free agents), x_0 (4 M), z]``"""

    def __init__(
        self,
        observations: ObservationSequence,
        game: GameSpec,
        config: EstimatorConfig,
        known_weights: Mapping[int, Any],
    ):
        self.observations = observations
        self.game = game
        self.config = config
        self.problem = GameProblem.from_game(game)
        self.num_agents = game.num_agents

        self.known_weights = {
            agent.id: np.asarray(known_weights[agent.id], dtype=float)
            for agent in game.agents
            if agent.id in known_weights
        }
        self.free = [
            m
            for m, agent in enumerate(game.agents)
            if agent.id not in self.known_weights
        ]
        sizes = [len(game.agents[m].weights) for m in self.free]
        self.rho_offsets = np.cumsum([0] + sizes)
        self.num_rho = int(self.rho_offsets[-1])
        self.x0_offset = self.num_rho
        self.z_offset = self.num_rho + STATE_DIM * self.num_agents
        self.size = self.z_offset + self.problem.size

        self.visible = [
            m
            for m, agent in enumerate(game.agents)
            if agent.id in observations.positions
        ]
        self.targets = np.concatenate(
            [observations.positions[game.agents[m].id].ravel() for m in self.visible]
        ) if self.visible else np.zeros(0)
        count = max(1, len(self.visible) * (observations.num_steps + 1))
        self.scale = 1.0 / np.sqrt(count)
        self.selection = self._selection()

    def _selection(self) -> sp.csc_matrix:
        """Maps variables onto the predicted observed positions"""
        rows, cols = [], []
        row = 0
        for m in self.visible:
            for n in range(self.observations.num_steps + 1):
                if n == 0:
                    base = self.x0_offset + STATE_DIM * m
                else:
                    base = self.z_offset + self.problem.x_offset(m, n - 1)
                rows.extend([row, row + 1])
                cols.extend([base, base + 1])
                row += 2
        return sp.csc_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(row, self.size)
        )

    # --- Variables

    def split(self, v):
        rho = v[: self.num_rho]
        x0 = v[self.x0_offset : self.z_offset].reshape(self.num_agents, STATE_DIM)
        z = v[self.z_offset :]
        return rho, x0, z

    def weights(self, rho) -> Tuple[list, sp.csc_matrix]:
        """All agents' weights and their Jacobian with respect to ``rho``"""
        weights = []
        blocks = []
        for m, agent in enumerate(self.game.agents):
            if agent.id in self.known_weights:
                weights.append(self.known_weights[agent.id])
                blocks.append(sp.csc_matrix((len(agent.weights), self.num_rho)))
            else:
                ix = self.free.index(m)
                lo, hi = self.rho_offsets[ix], self.rho_offsets[ix + 1]
                w, jacobian = _softplus_weights(rho[lo:hi])
                weights.append(w)
                padded = sp.lil_matrix((len(w), self.num_rho))
                padded[:, lo:hi] = jacobian
                blocks.append(padded.tocsc())
        return weights, sp.vstack(blocks).tocsc() if blocks else None

    # --- Residuals

    def observation_residual(self, v) -> np.ndarray:
        return self.scale * (self.selection @ v - self.targets)

    def constraints(self, v, jacobian: bool = True):
        rho, x0, z = self.split(v)
        weights, dw = self.weights(rho)
        evaluation = self.problem.evaluate(
            z, x0, weights, jacobian=jacobian, sensitivities=jacobian
        )
        if not jacobian:
            return evaluation.residual, None
        dG = sp.hstack(
            [
                evaluation.weight_jacobian @ dw,
                evaluation.initial_state_jacobian,
                evaluation.jacobian,
            ]
        ).tocsc()
        return evaluation.residual, dG

    def lagrangian(self, v, y, mu, jacobian: bool = True):
        r = self.observation_residual(v)
        c, dc = self.constraints(v, jacobian)
        R = np.concatenate([r, np.sqrt(mu) * c - y / np.sqrt(mu)])
        if not jacobian:
            return R, c, None
        JR = sp.vstack([self.scale * self.selection, np.sqrt(mu) * dc]).tocsc()
        return R, c, JR

    # --- Initial point

    def initial_point(
        self, warm_start: Optional["EstimateResult"], warm_start_offset: int
    ) -> np.ndarray:
        game, dt, N = self.game, self.game.dt, self.observations.num_steps
        rho = np.full(self.num_rho, UNIFORM_RHO)
        previous = warm_start.trajectories if warm_start is not None else {}

        if warm_start is not None:
            for ix, m in enumerate(self.free):
                agent = game.agents[m]
                if agent.id in warm_start.weights:
                    lo, hi = self.rho_offsets[ix], self.rho_offsets[ix + 1]
                    rho[lo:hi] = _softplus_preimage(warm_start.weights[agent.id])

        trajectories = []
        for m, agent in enumerate(game.agents):
            if agent.id in self.observations.positions:
                trajectories.append(
                    self._from_observations(self.observations.positions[agent.id], dt)
                )
            elif agent.id in previous:
                shifted = shift_trajectory(previous[agent.id], warm_start_offset, dt)
                trajectories.append(_fit_horizon(shifted, N, dt))
            else:
                prior = np.concatenate([agent.initial_state[:2], np.zeros(2)])
                single = game.subgame([agent.id]).with_initial_states({agent.id: prior})
                trajectories.append(straight_line_warm_start(single)[0])

        x0 = np.array([t.states[0] for t in trajectories])
        z = self.problem.pack(
            np.stack([t.states for t in trajectories]),
            np.stack([t.controls for t in trajectories]),
        )
        return np.concatenate([rho, x0.ravel(), z])

    def _from_observations(self, positions: np.ndarray, dt: float) -> Trajectory:
        """Smoothed positions with finite-difference velocities and controls"""
        window = min(self.config.smoothing_window, len(positions))
        smoothed = uniform_filter1d(positions, size=window, axis=0, mode="nearest")
        velocities = np.diff(smoothed, axis=0) / dt
        velocities = np.concatenate([velocities, velocities[-1:]], axis=0)
        controls = np.diff(velocities, axis=0) / dt
        return simulate_dynamics(
            np.concatenate([smoothed[0], velocities[0]]), controls, dt
        )


def _levenberg_marquardt(estimator: _Estimator, v, y, mu, config: EstimatorConfig):
    """Inner minimisation of the augmented Lagrangian"""
    damping = config.levenberg
    R, c, JR = estimator.lagrangian(v, y, mu)
    cost = 0.5 * float(R @ R)
    gradient = JR.T @ R
    iterations = 0
    for iterations in range(1, config.max_inner + 1):
        if np.max(np.abs(gradient)) <= config.stationarity_tol:
            break
        normal = (JR.T @ JR).tocsc()
        improved = False
        while damping <= 1e12:
            system = normal + damping * sp.identity(estimator.size, format="csc")
            dv = spsolve(system, -gradient)
            if np.all(np.isfinite(dv)):
                trial = v + dv
                R_trial, _, _ = estimator.lagrangian(trial, y, mu, jacobian=False)
                trial_cost = 0.5 * float(R_trial @ R_trial)
                if np.isfinite(trial_cost) and trial_cost < cost:
                    improved = True
                    break
            damping *= 10.0
        if not improved:
            logging.debug("Levenberg-Marquardt stalled at cost %.3e", cost)
            break

        decrease = cost - trial_cost
        v = trial
        damping = max(damping / 3.0, 1e-12)
        R, c, JR = estimator.lagrangian(v, y, mu)
        cost = 0.5 * float(R @ R)
        gradient = JR.T @ R
        if decrease <= 1e-15 * max(1.0, cost):
            break

    return v, c, float(np.max(np.abs(gradient))), iterations


def estimate_game(
    observations: ObservationSequence,
    template: GameSpec,
    config: Optional[EstimatorConfig] = None,
    warm_start: Optional[EstimateResult] = None,
    warm_start_offset: int = 0,
    known_weights: Optional[Mapping[int, Any]] = None,
    solver_config: Optional[NashSolverConfig] = None,
) -> EstimateResult:
    """Estimates the weights and trajectories of every agent of ``template``

    :param template: agents (visible and occluded) with their features; the
        initial states of unobserved agents give their prior position
    :param warm_start: a previous estimate whose trajectories are shifted by
        ``warm_start_offset`` steps to initialise unobserved agents
    :param known_weights: weights that are not estimated (by agent id)
    """
    config = config or EstimatorConfig()
    if config.cold_start:
        warm_start = None
    N = observations.num_steps
    if N < 1:
        raise ObservationError("at least two observation times are needed")
    unknown = set(observations.positions) - set(template.agent_ids)
    if unknown:
        raise ObservationError(f"observed agents {sorted(unknown)} not in the template")

    game = template.with_horizon(N)
    estimator = _Estimator(observations, game, config, known_weights or {})
    v = estimator.initial_point(warm_start, warm_start_offset)

    y = np.zeros(estimator.problem.size)
    mu = config.initial_penalty
    previous_violation = np.inf
    stationarity = np.inf
    outer_converged = False
    iterations = 0
    for iterations in range(1, config.max_outer + 1):
        v, c, stationarity, inner = _levenberg_marquardt(estimator, v, y, mu, config)
        violation = float(np.max(np.abs(c)))
        logging.debug(
            "Estimator outer iteration %d: violation %.3e, stationarity %.3e,"
            " penalty %.1e (%d inner)",
            iterations,
            violation,
            stationarity,
            mu,
            inner,
        )
        if (
            violation <= config.constraint_tol
            and stationarity <= config.stationarity_tol
        ):
            outer_converged = True
            break
        y = y - mu * c
        if violation > 0.25 * previous_violation:
            mu = min(mu * config.penalty_growth, config.max_penalty)
        previous_violation = violation

    rho, x0, z = estimator.split(v)
    weights, _ = estimator.weights(rho)
    estimated = GameSpec(
        game.dt,
        N,
        [
            agent.evolve(initial_state=x0[m], weights=weights[m])
            for m, agent in enumerate(game.agents)
        ],
        game.dynamics,
    )
    problem = GameProblem.from_game(estimated)
    violation = float(np.max(np.abs(problem.residual(z))))

    if config.restore_feasibility and violation > 0:
        solver_config = solver_config or NashSolverConfig(
            kkt_tolerance=config.constraint_tol
        )
        outcome = solve_problem(problem, z, solver_config, "estimate feasibility")
        if outcome.residual_norm <= violation:
            z, violation = outcome.z, outcome.residual_norm

    states = problem.full_states(z)
    _, controls, multipliers, _ = problem.unpack(z)
    # Mean squared position error per observed (agent, step) entry
    r = estimator.observation_residual(np.concatenate([rho, x0.ravel(), z]))
    objective = float(r @ r)

    ids = game.agent_ids
    visible_ids = tuple(ids[m] for m in estimator.visible)
    result = EstimateResult(
        agent_ids=ids,
        weights={ids[m]: weights[m] for m in range(len(ids))},
        trajectories={
            ids[m]: Trajectory(states[m], controls[m]) for m in range(len(ids))
        },
        multipliers={ids[m]: multipliers[m] for m in range(len(ids))},
        objective=objective,
        kkt_constraint_violation=violation,
        stationarity=stationarity,
        converged=bool(outer_converged and violation <= config.constraint_tol),
        iterations=iterations,
        visible_ids=visible_ids,
        occluded_ids=tuple(i for i in ids if i not in visible_ids),
        tolerance=config.constraint_tol,
        start=observations.start,
        provenance={
            "template_hash": config_hash(template.to_dict()),
            "sigma": observations.sigma,
            "seed": observations.seed,
            "constraint_tol": config.constraint_tol,
            "stationarity_tol": config.stationarity_tol,
            "proximity_epsilon": sorted(
                {
                    feature.epsilon
                    for agent in template.agents
                    for feature in agent.features
                    if isinstance(feature, ProximityFeature)
                }
            ),
        },
    )
    logging.info(
        "Estimated %d agents (%d occluded) from %d steps: objective %.3e,"
        " KKT violation %.3e, %s",
        len(ids),
        len(result.occluded_ids),
        N,
        objective,
        violation,
        "converged" if result.converged else "not converged",
    )
    return result


def estimate_game_ignorant(
    observations: ObservationSequence,
    template: GameSpec,
    config: Optional[EstimatorConfig] = None,
    **kwargs,
) -> EstimateResult:
    """Estimation that ignores unobserved agents

    Agents of ``template`` without observations are dropped before estimating,
    so that the result only covers the visible agents.
    """
    visible = [i for i in template.agent_ids if i in observations.positions]
    result = estimate_game(observations, template.subgame(visible), config, **kwargs)
    return attrs.evolve(result, ignorant=True)
