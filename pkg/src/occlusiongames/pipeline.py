"""Receding-horizon estimation and planning

At each simulation step the ego estimates the other agents from its last
observations, plans from the current states and applies its first control;
the other agents play the receding-horizon Nash strategies of the true game.
"""
import logging
import time
from contextlib import contextmanager
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import attrs
import numpy as np
from attrs import field, frozen

from .contingency import (
    THETA1,
    ContingencyPlan,
    ContingencySpec,
    solve_contingency,
    to_branching_step,
)
from .dynamics import shift_trajectory, step_dynamics
from .errors import GameError
from .game import (
    CONTROL_DIM,
    STATE_DIM,
    GameSpec,
    SolverResult,
    Trajectory,
    VisibilityModel,
    VisibilitySchedule,
)
from .inverse import (
    EstimateResult,
    EstimatorConfig,
    ObservationSequence,
    estimate_game,
    estimate_game_ignorant,
)
from .nash import NashSolverConfig, solve_olne
from .record import (
    AgentPlanningRecord,
    AgentPlansItem,
    ContingencyPlanItem,
    ControlItem,
    EstimateItem,
    FailureItem,
    FailureRecord,
    NashPlanItem,
    ObservationItem,
    PlanItem,
    PlanningRecord,
    Record,
    TimingItem,
    WarmupRecord,
    WorldStateItem,
)

ABSOLUTE = "absolute"
RELATIVE = "relative"

#: Errors after which a simulation is truncated
HARD_FAILURES = (GameError, ArithmeticError, np.linalg.LinAlgError, RuntimeError)


def _branching_mode(instance, attribute, value):
    if value not in (ABSOLUTE, RELATIVE):
        raise ValueError(f"branching_mode must be {ABSOLUTE} or {RELATIVE}")


@frozen
class PipelineConfig:
    """Parameters of a receding-horizon simulation

    ``branching_time`` is a simulation time (``absolute``) or a delay after
    each planning step (``relative``). ``horizon`` defaults to the horizon of
    the world game.
    """

    window: int = 10
    steps: int = 40
    horizon: Optional[int] = None
    branching_time: float = 2.0
    branching_mode: str = field(default=ABSOLUTE, validator=_branching_mode)
    belief: float = 0.7
    sigma: float = 0.0
    ego: int = 0
    seed: int = 0
    warm_start: bool = True
    solver: NashSolverConfig = field(factory=NashSolverConfig)
    estimator: EstimatorConfig = field(factory=EstimatorConfig)

    def __attrs_post_init__(self):
        if self.window < 2:
            raise ValueError(
                f"the observation window must be at least 2 ({self.window})"
            )
        if self.steps < self.window:
            raise ValueError(
                f"the simulation ({self.steps} steps) is shorter than the"
                f" observation window ({self.window})"
            )
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("the planning horizon must be positive")
        if not 0 <= self.belief <= 1:
            raise ValueError(f"belief {self.belief} is not in [0, 1]")
        if self.sigma < 0:
            raise ValueError("the noise level must be nonnegative")

    def to_dict(self):
        return attrs.asdict(self, recurse=True)


@frozen(eq=False)
class World:
    """Ground truth of a simulation

    ``priors`` are the states assumed for agents the ego has never observed.
    """

    game: GameSpec
    schedule: VisibilitySchedule
    priors: Mapping[int, np.ndarray] = field(factory=dict)

    @staticmethod
    def of(scenario) -> "World":
        return World(scenario.game, scenario.schedule, dict(scenario.priors))

    def to_dict(self):
        return {
            "game": self.game,
            "schedule": self.schedule,
            "priors": {str(k): v for k, v in sorted(self.priors.items())},
        }


@frozen(eq=False)
class SimulationTrace:
    """Records of a simulation, one per step

    ``states`` holds the true joint states ``(n + 1, M, 4)`` of the ``n``
    completed steps; a truncated run ends with a failure record.
    """

    kind: str
    world: World
    config: PipelineConfig
    records: Tuple[Record, ...] = field(converter=tuple)
    states: np.ndarray

    @property
    def agent_ids(self) -> Tuple[int, ...]:
        return self.world.game.agent_ids

    @property
    def failure(self) -> Optional[FailureItem]:
        if self.records and self.records[-1].has(FailureItem):
            return self.records[-1][FailureItem]
        return None

    @property
    def completed(self) -> bool:
        return self.failure is None

    @property
    def controls(self) -> np.ndarray:
        """Applied controls ``(n, M, 2)``"""
        controls = [r[ControlItem].controls for r in self.records if r.has(ControlItem)]
        if not controls:
            return np.zeros((0, len(self.agent_ids), CONTROL_DIM))
        return np.stack(controls)

    def trajectory(self, agent_id: int) -> Trajectory:
        ix = self.world.game.index(agent_id)
        return Trajectory(self.states[:, ix], self.controls[:, ix])

    def trajectories(self) -> Dict[int, Trajectory]:
        return {agent_id: self.trajectory(agent_id) for agent_id in self.agent_ids}

    def estimates(self) -> List[Tuple[int, EstimateResult]]:
        return [
            (r[WorldStateItem].k, r[EstimateItem].estimate)
            for r in self.records
            if r.has(EstimateItem)
        ]

    def plans(self) -> List[PlanItem]:
        return [r[PlanItem] for r in self.records if r.has(PlanItem)]

    def mean_speed(self, agent_id: int, until: Optional[int] = None) -> float:
        """Mean speed of an agent over the states before step ``until``"""
        velocities = self.trajectory(agent_id).velocities[:until]
        return float(np.mean(np.linalg.norm(velocities, axis=1)))

    def timings(self) -> List[Dict[str, float]]:
        return [dict(r[TimingItem].seconds) for r in self.records]

    def header(self):
        return {
            "schema": "occlusiongames.trace/1",
            "kind": self.kind,
            "world": self.world,
            "config": self.config,
            "completed": self.completed,
        }

    def step_dicts(self):
        """Serializable step records; timings are left out"""
        for record in self.records:
            yield record.to_dict(exclude=(TimingItem,))


# --- Shared helpers


def _branching_step(config: PipelineConfig, k: int, dt: float, horizon: int) -> int:
    """Branching step of the game planned at step ``k``"""
    step = to_branching_step(config.branching_time, dt)
    if config.branching_mode == ABSOLUTE:
        step -= k
    return int(min(max(step, 0), horizon))


def _shifted(
    trajectories: Sequence[Trajectory], dt: float, horizon: int, steps: int = 1
):
    shifted = []
    for trajectory in trajectories:
        trajectory = shift_trajectory(trajectory, steps, dt)
        if trajectory.horizon != horizon:
            return None
        shifted.append(trajectory)
    return shifted


def _warm_trajectories(
    previous: Optional[Mapping[int, Trajectory]], game: GameSpec, steps: int = 1
) -> Optional[List[Trajectory]]:
    """Previous trajectories in the order of ``game``, shifted by the ``steps``
    controls applied since they were planned"""
    if not previous or any(i not in previous for i in game.agent_ids):
        return None
    return _shifted(
        [previous[i] for i in game.agent_ids], game.dt, game.horizon, steps
    )


def _plan_trajectories(plan) -> Dict[int, Trajectory]:
    if isinstance(plan, ContingencyPlan):
        return dict(zip(plan.agent_ids[THETA1], plan.trajectories[THETA1]))
    return plan.as_mapping()


def _contingency_warm_start(
    previous: Optional[Mapping[int, Trajectory]], spec: ContingencySpec, steps: int = 1
):
    warm = {}
    for tag, game in spec.hypotheses.items():
        trajectories = _warm_trajectories(previous, game, steps)
        if trajectories is not None:
            warm[tag] = trajectories
    return warm


def _planned_control(planned: Optional[np.ndarray], offset: int) -> np.ndarray:
    if planned is None or offset >= len(planned):
        return np.zeros(CONTROL_DIM)
    return planned[offset]


class _Clock:
    """Accumulates the duration of the stages of a step"""

    def __init__(self):
        self.seconds = {}
        self.stage = None

    @contextmanager
    def __call__(self, stage: str):
        self.stage = stage
        start = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[stage] = self.seconds.get(stage, 0.0) + (
                time.perf_counter() - start
            )


# --- Receding-horizon Nash


@frozen(eq=False)
class RecedingHorizonRun:
    """Trajectories obtained by applying the first control of each solve"""

    agent_ids: Tuple[int, ...] = field(converter=tuple)
    trajectories: Tuple[Trajectory, ...] = field(converter=tuple)
    iterations: Tuple[int, ...] = field(converter=tuple)
    converged: Tuple[bool, ...] = field(converter=tuple)

    def trajectory(self, agent_id: int) -> Trajectory:
        return self.trajectories[self.agent_ids.index(agent_id)]


class _TruthPlayer:
    """Receding-horizon Nash strategies of the true game"""

    def __init__(self, game: GameSpec, horizon: int, config, warm_start: bool):
        self.game = game
        self.horizon = horizon
        self.config = config
        self.warm_start = warm_start
        self.previous: Optional[SolverResult] = None
        self.offset = 0

    def solve(self, k: int, states: np.ndarray) -> SolverResult:
        game = (
            self.game.advanced(k).with_initial_states(states).with_horizon(self.horizon)
        )
        warm = None
        if self.warm_start and self.previous is not None:
            # The previous plan has been applied for offset + 1 steps
            warm = _warm_trajectories(
                self.previous.as_mapping(), game, self.offset + 1
            )
        result = solve_olne(game, self.config, warm)
        if result.converged or self.previous is None:
            self.previous, self.offset = result, 0
        else:
            self.offset += 1
            logging.warning(
                "Nash game at step %d did not converge; applying the previous plan", k
            )
            result = self.previous
        return result

    def controls(self, result: SolverResult) -> np.ndarray:
        return np.stack(
            [
                _planned_control(result.trajectory(i).controls, self.offset)
                for i in self.game.agent_ids
            ]
        )


def receding_horizon_nash(
    game: GameSpec,
    steps: int,
    config: Optional[NashSolverConfig] = None,
    horizon: Optional[int] = None,
    warm_start: bool = True,
) -> RecedingHorizonRun:
    """Rolls the world forward with the first controls of successive Nash solves

    Goals that vary with time are re-indexed at each step.
    """
    config = config or NashSolverConfig()
    player = _TruthPlayer(game, horizon or game.horizon, config, warm_start)
    states = [game.initial_states]
    controls, iterations, converged = [], [], []
    for k in range(steps):
        result = player.solve(k, states[-1])
        u = player.controls(result)
        iterations.append(result.iterations)
        converged.append(player.offset == 0 and result.converged)
        controls.append(u)
        states.append(
            np.stack([step_dynamics(x, v, game.dt) for x, v in zip(states[-1], u)])
        )

    states, controls = np.stack(states), np.stack(controls).reshape(
        steps, game.num_agents, CONTROL_DIM
    )
    return RecedingHorizonRun(
        game.agent_ids,
        [Trajectory(states[:, m], controls[:, m]) for m in range(game.num_agents)],
        iterations,
        converged,
    )


# --- Estimation and planning pipeline


class Pipeline:
    """Simulation of an ego that estimates and plans at each step

    The occlusion-aware ego estimates every agent of the world and plans a
    contingency game; the occlusion-ignorant ego only estimates and plans
    with the agents it currently sees.
    """

    def __init__(self, world: World, config: PipelineConfig, aware: bool = True):
        self.world = world
        self.config = config
        self.aware = aware
        self.game = world.game
        self.dt = self.game.dt
        self.horizon = config.horizon or self.game.horizon
        self.ego = config.ego
        self.ids = self.game.agent_ids
        self.ego_index = self.game.index(self.ego)
        self.reveal_step = to_branching_step(config.branching_time, self.dt)

        self.rng = np.random.default_rng(config.seed)
        self.truth = _TruthPlayer(
            self.game, self.horizon, config.solver, config.warm_start
        )
        self.measurements: List[np.ndarray] = []
        self.estimate: Optional[EstimateResult] = None
        self.previous_plan: Optional[Dict[int, Trajectory]] = None
        self.planned: Optional[np.ndarray] = None
        self.plan_offset = 0

    @property
    def kind(self) -> str:
        return "aware" if self.aware else "ignorant"

    def _measure(self, states: np.ndarray):
        positions = states[:, :2] + self.config.sigma * self.rng.standard_normal(
            (len(self.ids), 2)
        )
        # The ego knows its own position
        positions[self.ego_index] = states[self.ego_index, :2]
        self.measurements.append(positions)

    def _window_visibility(self, first: int, k: int) -> VisibilityModel:
        """Agents seen by the ego during the whole window"""
        current = self.world.schedule.at(k)
        visible = set(self.ids)
        for t in range(first, k + 1):
            visible &= self.world.schedule.at(t).visible_to(self.ego)
        return VisibilityModel(
            self.ids, visible, current.per_observer, observer=self.ego
        )

    def _template(self, first: int, k: int, visibility: VisibilityModel) -> GameSpec:
        """True features with the priors of the agents without observations"""
        priors = {}
        for i in self.ids:
            if i in visibility.visible_set:
                continue
            if i in self.world.priors:
                priors[i] = self.world.priors[i]
            else:
                # Seen now but not during the whole window
                position = self.measurements[k][self.game.index(i)]
                priors[i] = np.concatenate([position, np.zeros(2)])
        return (
            self.game.advanced(first)
            .with_horizon(self.config.window)
            .with_initial_states(priors)
        )

    def _estimate(self, k: int) -> Tuple[ObservationSequence, EstimateResult]:
        first = k - self.config.window
        visibility = self._window_visibility(first, k)
        measurements = np.stack(self.measurements[first : k + 1])
        observations = ObservationSequence(
            {
                i: measurements[:, self.game.index(i)]
                for i in sorted(visibility.visible_set)
            },
            self.config.sigma,
            visibility,
            seed=self.config.seed,
            start=first,
        )
        template = self._template(first, k, visibility)
        seen_now = self.world.schedule.at(k).visible_to(self.ego)
        if not self.aware:
            template = template.subgame([i for i in self.ids if i in seen_now])

        kwargs = dict(
            known_weights={self.ego: self.game.agent(self.ego).weights},
            solver_config=self.config.solver,
        )
        if self.estimate is not None and set(self.estimate.agent_ids) <= set(
            template.agent_ids
        ):
            kwargs.update(warm_start=self.estimate, warm_start_offset=1)

        if not self.aware and set(template.agent_ids) == visibility.visible_set:
            estimate = estimate_game_ignorant(
                observations, template, self.config.estimator, **kwargs
            )
        else:
            estimate = estimate_game(
                observations, template, self.config.estimator, **kwargs
            )
        return observations, estimate

    def _planning_game(self, k: int, states: np.ndarray) -> GameSpec:
        """Estimated game from the current states, with the true ego state"""
        initial = dict(self.estimate.final_states())
        initial[self.ego] = states[self.ego_index]
        return (
            self.game.advanced(k)
            .subgame(self.estimate.agent_ids)
            .with_weights(self.estimate.weights)
            .with_initial_states(initial)
            .with_horizon(self.horizon)
        )

    def _plan(self, k: int, states: np.ndarray) -> PlanItem:
        game = self._planning_game(k, states)
        hidden = [
            i
            for i in game.agent_ids
            if i not in self.world.schedule.at(k).visible_to(self.ego)
        ]
        branching_step = _branching_step(self.config, k, self.dt, self.horizon)
        previous = self.previous_plan if self.config.warm_start else None

        if self.aware and hidden and branching_step > 0:
            spec = ContingencySpec.from_game(
                game,
                self.ego,
                hidden,
                self.config.belief,
                branching_step=branching_step,
            )
            plan = solve_contingency(
                spec,
                self.config.solver,
                _contingency_warm_start(previous, spec, self.plan_offset + 1),
            )
            item = ContingencyPlanItem(False, plan, THETA1)
        else:
            # Nothing is hidden any more (or the branching step passed)
            result = solve_olne(
                game,
                self.config.solver,
                _warm_trajectories(previous, game, self.plan_offset + 1),
            )
            item = NashPlanItem(False, result)

        if item.converged or self.planned is None:
            self.planned = item.ego_controls(self.ego)
            self.previous_plan = _plan_trajectories(
                item.plan if isinstance(item, ContingencyPlanItem) else item.result
            )
            self.plan_offset = 0
        else:
            logging.warning(
                "Ego plan at step %d did not converge; applying the previous plan", k
            )
            item.fallback = True
            self.plan_offset += 1
        return item

    def run(self) -> SimulationTrace:
        config = self.config
        states = self.game.initial_states
        trajectory = [states]
        records = []
        logging.info(
            "Simulating %d steps (%s ego %d, window %d, horizon %d)",
            config.steps,
            self.kind,
            self.ego,
            config.window,
            self.horizon,
        )

        for k in range(config.steps):
            clock = _Clock()
            world_item = WorldStateItem(k, states)
            self._measure(states)
            try:
                with clock("truth"):
                    truth = self.truth.solve(k, states)
                    controls = self.truth.controls(truth)

                if k < config.window:
                    # The ego coasts until it has enough observations
                    controls[self.ego_index] = 0.0
                    record = WarmupRecord(
                        world_item, ControlItem(controls), TimingItem(clock.seconds)
                    )
                else:
                    with clock("estimation"):
                        observations, self.estimate = self._estimate(k)
                    with clock("planning"):
                        plan = self._plan(k, states)
                    controls[self.ego_index] = _planned_control(
                        self.planned, self.plan_offset
                    )
                    record = PlanningRecord(
                        world_item,
                        ObservationItem(observations),
                        EstimateItem(self.estimate),
                        plan,
                        ControlItem(controls),
                        TimingItem(clock.seconds),
                    )
            except HARD_FAILURES as e:
                logging.error("Simulation stopped at step %d: %s", k, e)
                records.append(
                    FailureRecord(
                        world_item,
                        FailureItem(clock.stage, type(e).__name__, str(e)),
                        TimingItem(clock.seconds),
                    )
                )
                break

            records.append(record)
            states = np.stack(
                [step_dynamics(x, u, self.dt) for x, u in zip(states, controls)]
            )
            trajectory.append(states)

        return SimulationTrace(
            self.kind,
            self.world,
            config,
            records,
            np.stack(trajectory).reshape(-1, len(self.ids), STATE_DIM),
        )


def run_pipeline(world: World, config: PipelineConfig) -> SimulationTrace:
    """Occlusion-aware estimation and contingency planning"""
    return Pipeline(world, config, aware=True).run()


def run_pipeline_ignorant(world: World, config: PipelineConfig) -> SimulationTrace:
    """Estimation and Nash planning with the agents currently seen by the ego"""
    return Pipeline(world, config, aware=False).run()


# --- Planning without estimation


class _AgentPlanner:
    def __init__(self, agent_id: int):
        self.agent_id = agent_id
        self.previous: Optional[Dict[int, Trajectory]] = None
        self.planned: Optional[np.ndarray] = None
        self.offset = 0

    def update(self, k: int, outcome, controls: np.ndarray) -> bool:
        """Keeps the new plan if it converged; returns whether it fell back"""
        if outcome.converged or self.planned is None:
            self.previous = _plan_trajectories(outcome)
            self.planned, self.offset = controls, 0
            return False
        logging.warning(
            "Plan of agent %d at step %d did not converge; applying the previous plan",
            self.agent_id,
            k,
        )
        self.offset += 1
        return True

    @property
    def control(self) -> np.ndarray:
        return _planned_control(self.planned, self.offset)


def run_planning_simulation(
    world: World, config: PipelineConfig, aware: bool = True
) -> SimulationTrace:
    """Every agent plans with what it sees, from the true states and costs

    Occlusion-aware agents solve a contingency game over the agents hidden
    from them; occlusion-ignorant agents solve the Nash game of the agents
    they see. There is no estimation and no observation noise.
    """
    game, dt = world.game, world.game.dt
    horizon = config.horizon or game.horizon
    planners = {i: _AgentPlanner(i) for i in game.agent_ids}
    states = game.initial_states
    trajectory = [states]
    records = []
    kind = "planning-aware" if aware else "planning-ignorant"

    for k in range(config.steps):
        clock = _Clock()
        world_item = WorldStateItem(k, states)
        full = game.advanced(k).with_initial_states(states).with_horizon(horizon)
        visibility = world.schedule.at(k)
        branching_step = _branching_step(config, k, dt, horizon)
        solves: Dict[frozenset, SolverResult] = {}
        controls = np.zeros((game.num_agents, CONTROL_DIM))
        converged, iterations, fallback = {}, {}, {}

        try:
            with clock("planning"):
                for m, i in enumerate(game.agent_ids):
                    planner = planners[i]
                    seen = visibility.visible_to(i)
                    hidden = [j for j in game.agent_ids if j not in seen]
                    warm = planner.previous if config.warm_start else None
                    shift = planner.offset + 1
                    if aware and hidden and branching_step > 0:
                        spec = ContingencySpec.from_game(
                            full,
                            i,
                            hidden,
                            config.belief,
                            branching_step=branching_step,
                        )
                        outcome = solve_contingency(
                            spec,
                            config.solver,
                            _contingency_warm_start(warm, spec, shift),
                        )
                        planned = np.concatenate(
                            [outcome.shared_controls, outcome.branch_controls(THETA1)]
                        )
                    else:
                        # Agents seeing the same agents share a solve
                        key = frozenset(game.agent_ids if aware else seen)
                        if key not in solves:
                            sub = full.subgame(key)
                            solves[key] = solve_olne(
                                sub, config.solver, _warm_trajectories(warm, sub, shift)
                            )
                        outcome = solves[key]
                        planned = outcome.trajectory(i).controls
                    fallback[i] = planner.update(k, outcome, planned)
                    converged[i] = bool(outcome.converged)
                    iterations[i] = int(outcome.iterations)
                    controls[m] = planner.control
        except HARD_FAILURES as e:
            logging.error("Simulation stopped at step %d: %s", k, e)
            records.append(
                FailureRecord(
                    world_item,
                    FailureItem("planning", type(e).__name__, str(e)),
                    TimingItem(clock.seconds),
                )
            )
            break

        records.append(
            AgentPlanningRecord(
                world_item,
                AgentPlansItem(converged, iterations, fallback),
                ControlItem(controls),
                TimingItem(clock.seconds),
            )
        )
        states = np.stack([step_dynamics(x, u, dt) for x, u in zip(states, controls)])
        trajectory.append(states)

    return SimulationTrace(
        kind,
        world,
        config,
        records,
        np.stack(trajectory).reshape(-1, game.num_agents, STATE_DIM),
    )
