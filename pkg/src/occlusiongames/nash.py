"""Open-loop Nash equilibria by Newton's method on the stacked KKT conditions"""
import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from attrs import define, evolve, field, frozen
from scipy.sparse.linalg import splu

from .dynamics import simulate_dynamics, straight_line_warm_start
from .errors import DimensionError, NonFiniteError
from .features import trajectory_cost
from .game import STATE_DIM, GameSpec, SolverResult, Trajectory
from .kkt import GameProblem

#: A unilateral deviation must lower the cost by more than this to count
NASH_CHECK_THRESHOLD = 1e-8

WarmStart = Union[SolverResult, Sequence[Trajectory], None]


def _positive(instance, attribute, value):
    if not value > 0:
        raise ValueError(f"{attribute.name} must be positive (got {value})")


def _fraction(instance, attribute, value):
    if not 0 < value < 1:
        raise ValueError(f"{attribute.name} must be in (0, 1) (got {value})")


def _at_least_one(instance, attribute, value):
    if value < 1:
        raise ValueError(f"{attribute.name} must be at least 1 (got {value})")


def _above_one(instance, attribute, value):
    if not value > 1:
        raise ValueError(f"{attribute.name} must be above 1 (got {value})")


@frozen
class NashSolverConfig:
    kkt_tolerance: float = field(default=1e-6, validator=_positive)
    #: Newton iterations per solve (each continuation stage has its own)
    max_iterations: int = field(default=100, validator=_at_least_one)
    armijo: float = field(default=1e-4, validator=_fraction)
    backtracking: float = field(default=0.5, validator=_fraction)
    min_step: float = field(default=1e-10, validator=_positive)
    #: Initial Levenberg-Marquardt damping, relative to the largest diagonal
    #: entry of ``JᵀJ``
    levenberg_floor: float = field(default=1e-8, validator=_positive)
    #: Follow the solutions from rescaled coupling weights when a direct
    #: solve fails
    continuation: bool = True
    continuation_scale: float = field(default=8.0, validator=_above_one)
    max_stages: int = field(default=24, validator=_at_least_one)

    def to_dict(self):
        return {
            "kkt_tolerance": self.kkt_tolerance,
            "max_iterations": self.max_iterations,
            "armijo": self.armijo,
            "backtracking": self.backtracking,
            "min_step": self.min_step,
            "levenberg_floor": self.levenberg_floor,
            "continuation": self.continuation,
            "continuation_scale": self.continuation_scale,
            "max_stages": self.max_stages,
        }


@define
class NewtonOutcome:
    z: np.ndarray
    residual: np.ndarray
    iterations: int
    converged: bool
    #: Infinity norms of the successive iterates
    history: List[float]

    @property
    def residual_norm(self) -> float:
        return _norm(self.residual)


def _norm(G: np.ndarray) -> float:
    return float(np.max(np.abs(G))) if G.size else 0.0


def _newton_direction(J: sp.csc_matrix, G: np.ndarray) -> Optional[np.ndarray]:
    try:
        dz = splu(J).solve(-G)
    except RuntimeError as e:
        logging.debug("Singular KKT matrix (%s)", e)
        return None
    if not np.all(np.isfinite(dz)):
        return None
    # Near-singular matrices give inaccurate solves
    if np.linalg.norm(J @ dz + G) > 1e-6 * max(1.0, np.linalg.norm(G)):
        return None
    return dz


def _levenberg_direction(
    normal: sp.csc_matrix, gradient: np.ndarray, damping: float
) -> Optional[np.ndarray]:
    system = (normal + damping * sp.identity(normal.shape[0], format="csc")).tocsc()
    try:
        dz = splu(system).solve(-gradient)
    except RuntimeError as e:
        logging.debug("Levenberg system failed (%s)", e)
        return None
    return dz if np.all(np.isfinite(dz)) else None


class _Damping:
    """Levenberg-Marquardt damping driven by the gain ratio

    The damping shrinks after a good step and grows geometrically (with a
    growing factor) after each rejected one.
    """

    def __init__(self, relative: float):
        self.relative = relative
        self.value: Optional[float] = None
        self.growth = 2.0

    def start(self, normal: sp.csc_matrix):
        if self.value is None:
            self.value = self.relative * max(1.0, float(normal.diagonal().max()))

    def accept(self, ratio: float):
        self.value *= max(1.0 / 3.0, 1.0 - (2.0 * ratio - 1.0) ** 3)
        self.growth = 2.0

    def reject(self):
        self.value *= self.growth
        self.growth *= 2.0


#: Rejected Levenberg-Marquardt steps before an iteration gives up
MAX_DAMPING_TRIALS = 30


def newton_solve(
    residual: Callable[[np.ndarray], np.ndarray],
    linearize: Callable[[np.ndarray], Tuple[np.ndarray, sp.csc_matrix]],
    z0: np.ndarray,
    config: NashSolverConfig,
    where: str = "KKT system",
) -> NewtonOutcome:
    """Damped Newton on ``G(z) = 0`` with Armijo backtracking on ``½‖G‖²``

    When the full Newton step is not accepted, a Levenberg-Marquardt step
    ``(JᵀJ + μI) dz = −JᵀG`` is tried as well and the step with the lower
    merit wins. Without convergence, the iterate with the smallest residual
    is returned.
    """
    z = np.array(z0, dtype=float)
    G, J = linearize(z)
    if not np.all(np.isfinite(G)):
        raise NonFiniteError(where, iterate=z.copy(), iteration=0)

    damping = _Damping(config.levenberg_floor)
    best_z, best_G = z, G
    history = []
    iterations = 0
    converged = False
    while True:
        norm = _norm(G)
        history.append(norm)
        if norm < _norm(best_G):
            best_z, best_G = z, G
        if norm <= config.kkt_tolerance:
            converged = True
            break
        if iterations >= config.max_iterations:
            break

        merit = 0.5 * float(G @ G)
        candidates = []
        step = 0.0
        dz = _newton_direction(J, G)
        if dz is not None:
            step = 1.0
            while step >= config.min_step:
                trial = residual(z + step * dz)
                trial_merit = 0.5 * float(trial @ trial)
                if np.isfinite(trial_merit) and trial_merit <= merit * (
                    1.0 - 2.0 * config.armijo * step
                ):
                    candidates.append(
                        (trial_merit, step * dz, f"newton step {step:.3e}")
                    )
                    break
                step *= config.backtracking

        if step < 1.0:
            gradient = J.T @ G
            normal = (J.T @ J).tocsc()
            damping.start(normal)
            for _ in range(MAX_DAMPING_TRIALS):
                dz = _levenberg_direction(normal, gradient, damping.value)
                if dz is not None:
                    trial = residual(z + dz)
                    trial_merit = 0.5 * float(trial @ trial)
                    predicted = 0.5 * float(dz @ (damping.value * dz - gradient))
                    if np.isfinite(trial_merit) and predicted > 0:
                        ratio = (merit - trial_merit) / predicted
                        if ratio > 0:
                            candidates.append(
                                (trial_merit, dz, f"levenberg μ={damping.value:.1e}")
                            )
                            damping.accept(ratio)
                            break
                damping.reject()

        if not candidates:
            logging.info("%s: line search stalled at residual %.3e", where, norm)
            break

        _, accepted, kind = min(candidates, key=lambda c: c[0])
        logging.debug(
            "%s iteration %d: residual %.3e, %s", where, iterations, norm, kind
        )
        z = z + accepted
        iterations += 1
        G, J = linearize(z)
        if not np.all(np.isfinite(G)):
            raise NonFiniteError(where, iterate=z.copy(), iteration=iterations)

    if not converged and _norm(best_G) < _norm(G):
        logging.debug("%s: returning the best iterate (%.3e)", where, _norm(best_G))
        z, G = best_z, best_G
        history.append(_norm(G))
    return NewtonOutcome(z, G, iterations, converged, history)


# --- Nash games


def _warm_start_arrays(spec: GameSpec, warm_start: WarmStart):
    """Controls and multipliers of the warm start, states re-rolled from the
    initial states of ``spec``"""
    multipliers = None
    if warm_start is None:
        trajectories = straight_line_warm_start(spec)
    elif isinstance(warm_start, SolverResult):
        trajectories = warm_start.trajectories
        multipliers = warm_start.multipliers
    else:
        trajectories = list(warm_start)

    if len(trajectories) != spec.num_agents:
        raise DimensionError(
            "warm start trajectories", spec.num_agents, len(trajectories)
        )
    for trajectory in trajectories:
        if trajectory.horizon != spec.horizon:
            raise DimensionError("warm start horizon", spec.horizon, trajectory.horizon)
    if multipliers is not None and multipliers.shape != (
        spec.num_agents,
        spec.horizon,
        STATE_DIM,
    ):
        multipliers = None

    rollouts = [
        simulate_dynamics(agent.initial_state, trajectory.controls, spec.dt)
        for agent, trajectory in zip(spec.agents, trajectories)
    ]
    states = np.stack([t.states for t in rollouts])
    controls = np.stack([t.controls for t in rollouts])
    return states, controls, multipliers


def rolled_out(problem: GameProblem, z: np.ndarray) -> np.ndarray:
    """Replaces the states of ``z`` by the exact rollout of its controls"""
    _, controls, multipliers, ties = problem.unpack(z)
    states = np.stack(
        [
            simulate_dynamics(body.initial_state, controls[b], problem.dt).states
            for b, body in enumerate(problem.bodies)
        ]
    )
    return problem.pack(states, controls, multipliers, ties)


def _system(problem: GameProblem, factor: float, row_scale: Optional[np.ndarray]):
    """Residual and linearization with the coupling weights scaled by ``factor``"""
    weights = problem.coupling_weights(factor)

    def residual(z):
        G = problem.residual(z, weights=weights)
        return G if row_scale is None else row_scale * G

    def linearize(z):
        G, J = problem.linearize(z, weights=weights)
        if row_scale is None:
            return G, J
        return row_scale * G, (sp.diags(row_scale) @ J).tocsc()

    return residual, linearize


#: Continuation gives up below this step
MIN_CONTINUATION_STEP = 1.0 / 64

#: Tolerance of the intermediate continuation stages
STAGE_TOLERANCE = 1e-4


def _continuation(
    problem: GameProblem,
    z0: np.ndarray,
    config: NashSolverConfig,
    where: str,
    row_scale: Optional[np.ndarray],
    start: float,
) -> Tuple[Optional[NewtonOutcome], int]:
    """Follows the solutions while the coupling weights go from ``start``
    times their value to their value

    Each stage starts from the solution of the previous one; the step halves
    when a stage fails and doubles when it succeeds. Returns the best outcome
    at full coupling (None if never reached) and the number of iterations.
    """

    def factor(t: float) -> float:
        return start ** (1.0 - t) if start > 0 else t

    loose = evolve(config, kkt_tolerance=max(config.kkt_tolerance, STAGE_TOLERANCE))
    residual, linearize = _system(problem, factor(0.0), row_scale)
    outcome = newton_solve(
        residual, linearize, z0, loose, f"{where} (coupling ×{factor(0.0):.3g})"
    )
    iterations = outcome.iterations
    if not outcome.converged:
        return None, iterations

    t, z, step = 0.0, outcome.z, 0.5
    best = None
    for _ in range(config.max_stages):
        target = min(1.0, t + step)
        final = target == 1.0
        residual, linearize = _system(problem, factor(target), row_scale)
        outcome = newton_solve(
            residual,
            linearize,
            z,
            config if final else loose,
            f"{where} (coupling ×{factor(target):.3g})",
        )
        iterations += outcome.iterations
        if final and (best is None or outcome.residual_norm < best.residual_norm):
            best = outcome
        if outcome.converged:
            if final:
                break
            t, z, step = target, outcome.z, min(2.0 * step, 1.0)
        else:
            step /= 2.0
            if step < MIN_CONTINUATION_STEP:
                break
    return best, iterations


def solve_problem(
    problem: GameProblem,
    z0: np.ndarray,
    config: NashSolverConfig,
    where: str,
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> NewtonOutcome:
    """Solves a stacked game and returns its best feasible iterate

    Stationarity rows are divided by the cost scale of their body, so that
    a branch with a small belief is solved as accurately as the others.
    When the direct solve fails on a coupled game, the solution is followed
    from amplified coupling weights down to the actual ones, then from
    uncoupled agents up.

    ``project`` maps the solution onto the linear constraints before the
    states are rolled out; the rollout replaces the solution unless its
    residual is larger. The residual history ends with the residual of the
    returned iterate, and ``iterations`` counts every stage.
    """
    row_scale = problem.row_scale()
    residual, linearize = _system(problem, 1.0, row_scale)
    outcome = newton_solve(residual, linearize, z0, config, where)
    iterations = outcome.iterations

    if not outcome.converged and config.continuation and problem.coupled:
        for start in (config.continuation_scale, 0.0):
            logging.info(
                "%s: residual %.3e, continuing from coupling weights ×%g",
                where,
                outcome.residual_norm,
                start,
            )
            continued, used = _continuation(
                problem, z0, config, where, row_scale, start
            )
            iterations += used
            if (
                continued is not None
                and continued.residual_norm < outcome.residual_norm
            ):
                outcome = continued
            if outcome.converged:
                break

    z, G = outcome.z, outcome.residual
    rollout = rolled_out(problem, project(z) if project is not None else z)
    rollout_residual = residual(rollout)
    if _norm(rollout_residual) <= _norm(G):
        z, G = rollout, rollout_residual
    else:
        logging.info(
            "%s: keeping the solver iterate (rollout residual %.3e > %.3e)",
            where,
            _norm(rollout_residual),
            _norm(G),
        )

    norm = _norm(G)
    history = list(outcome.history)
    if not history or history[-1] != norm:
        history.append(norm)
    return NewtonOutcome(z, G, iterations, norm <= config.kkt_tolerance, history)


def solve_olne(
    spec: GameSpec,
    config: Optional[NashSolverConfig] = None,
    warm_start: WarmStart = None,
) -> SolverResult:
    """Computes an open-loop Nash equilibrium of ``spec``

    Non-convergence is reported in the result, not raised. Without a warm
    start, agents start on straight lines toward their goals.
    """
    config = config or NashSolverConfig()
    problem = GameProblem.from_game(spec)
    states, controls, multipliers = _warm_start_arrays(spec, warm_start)
    z0 = problem.pack(states, controls, multipliers)

    outcome = solve_problem(problem, z0, config, f"{spec.num_agents}-agent Nash game")
    result = result_from_problem(spec, problem, outcome, config)
    logging.info(
        "Nash game with %d agents: %s after %d iterations (residual %.3e)",
        spec.num_agents,
        "converged" if result.converged else "not converged",
        result.iterations,
        result.kkt_residual_norm,
    )
    return result


def result_from_problem(
    spec: GameSpec, problem: GameProblem, outcome: NewtonOutcome, config
) -> SolverResult:
    states = problem.full_states(outcome.z)
    _, controls, multipliers, _ = problem.unpack(outcome.z)
    return SolverResult(
        agent_ids=spec.agent_ids,
        trajectories=[Trajectory(s, u) for s, u in zip(states, controls)],
        multipliers=multipliers,
        kkt_residual_norm=outcome.residual_norm,
        iterations=outcome.iterations,
        converged=outcome.converged,
        tolerance=config.kkt_tolerance,
        residual_history=outcome.history,
    )


def kkt_residual(
    spec: GameSpec, trajectories: Sequence[Trajectory], multipliers
) -> np.ndarray:
    """Stacked first-order conditions of ``spec`` at a joint trajectory"""
    trajectories = list(trajectories)
    if len(trajectories) != spec.num_agents:
        raise DimensionError("trajectories", spec.num_agents, len(trajectories))
    for trajectory in trajectories:
        if trajectory.horizon != spec.horizon:
            raise DimensionError("trajectory horizon", spec.horizon, trajectory.horizon)

    problem = GameProblem.from_game(spec)
    z = problem.pack(
        np.stack([t.states for t in trajectories]),
        np.stack([t.controls for t in trajectories]),
        multipliers,
    )
    return problem.residual(z)


def local_nash_check(
    spec: GameSpec,
    result: SolverResult,
    num_perturbations: int = 200,
    radius: float = 1e-3,
    seed: int = 0,
) -> Tuple[bool, float]:
    """Tries unilateral deviations around a solution

    Each agent's controls are perturbed by random vectors of norm at most
    ``radius``; its states are rolled out while the other agents keep their
    trajectories. Returns whether no deviation lowers the deviating agent's
    cost by more than 1e-8, and the largest decrease found.
    """
    rng = np.random.default_rng(seed)
    states, controls = result.states, result.controls
    worst = -np.inf

    for m, agent in enumerate(spec.agents):

        def cost(u):
            joint_states = states.copy()
            joint_controls = controls.copy()
            joint_states[m] = simulate_dynamics(agent.initial_state, u, spec.dt).states
            joint_controls[m] = u
            return trajectory_cost(spec, m, joint_states, joint_controls)

        reference = cost(controls[m])
        for _ in range(num_perturbations):
            direction = rng.standard_normal(controls[m].shape)
            direction *= radius * rng.uniform() / np.linalg.norm(direction)
            worst = max(worst, reference - cost(controls[m] + direction))

    if not np.isfinite(worst):
        worst = 0.0
    return bool(worst <= NASH_CHECK_THRESHOLD), float(worst)
