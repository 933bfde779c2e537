"""Seeded generators for the experiment worlds

Geometry, speeds and sampling ranges are configuration defaults; every
generator is a pure function of its configuration and seed.
"""
import logging
from typing import Dict, Mapping, Optional, Tuple

import attrs
import numpy as np
from attrs import field, frozen

from .contingency import to_branching_step
from .features import (
    DEFAULT_PROXIMITY_EPSILON,
    EffortFeature,
    GoalFeature,
    LaneFeature,
    ProximityFeature,
)
from .game import AgentSpec, GameSpec, VisibilityModel, VisibilitySchedule

THREE_AGENT = "three-agent"
COLLISION_AVOIDANCE = "collision-avoidance"
CROSSING_ROAD = "crossing-road"

SCENARIO_KINDS = (THREE_AGENT, COLLISION_AVOIDANCE, CROSSING_ROAD)

Range = Tuple[float, float]


def _kind(instance, attribute, value):
    if value not in SCENARIO_KINDS:
        raise ValueError(f"unknown scenario kind {value!r}")


@frozen
class ScenarioConfig:
    kind: str = field(default=THREE_AGENT, validator=_kind)
    num_agents: Optional[int] = None
    dt: float = 0.1
    horizon: int = 30
    #: Side of the square region where agents start [m]
    region: float = 20.0
    #: Radius of the circle of the three-agent scenario [m]
    radius: float = 5.0
    min_separation: float = 2.0
    goal_noise: float = 1.0
    max_speed: float = 2.0
    occlusion_probability: float = 0.3
    branching_time: float = 2.0
    belief: float = 0.7
    sigma: float = 0.0
    proximity_epsilon: float = DEFAULT_PROXIMITY_EPSILON
    goal_weight: Range = field(default=(0.5, 1.5), converter=tuple)
    proximity_weight: Range = field(default=(2.0, 6.0), converter=tuple)
    effort_weight: Range = field(default=(0.5, 1.5), converter=tuple)
    lane_weight: Range = field(default=(1.0, 3.0), converter=tuple)
    lane_width: float = 4.0
    #: Distance from the intersection centre to the start of the roads [m]
    road_length: float = 7.0
    #: Number of time indices covered by time-varying goals
    goal_steps: int = 400
    #: Steps by which a moving goal leads its agent
    goal_lookahead: int = 10

    @property
    def agent_count(self) -> int:
        if self.num_agents is not None:
            return self.num_agents
        return {THREE_AGENT: 3, COLLISION_AVOIDANCE: 4, CROSSING_ROAD: 4}[self.kind]

    @property
    def reveal_step(self) -> int:
        return to_branching_step(self.branching_time, self.dt)

    def to_dict(self):
        return attrs.asdict(self)


@frozen(eq=False)
class Scenario:
    """A generated world

    ``schedule`` gives the visibility before and after the occlusions are
    lifted; ``priors`` are the states an observer assumes for agents it cannot
    see (by agent id).
    """

    kind: str
    seed: int
    config: ScenarioConfig
    game: GameSpec
    schedule: VisibilitySchedule
    ego_id: Optional[int] = None
    lanes: Tuple[LaneFeature, ...] = field(default=(), converter=tuple)
    priors: Mapping[int, np.ndarray] = field(factory=dict)

    @property
    def visibility(self) -> VisibilityModel:
        return self.schedule.before

    @property
    def occluded_ids(self) -> Tuple[int, ...]:
        return tuple(sorted(self.visibility.occluded_set))

    def occluded_pairs(self) -> Tuple[Tuple[int, int], ...]:
        """Pairs of agent indices that do not see each other initially"""
        ids = self.game.agent_ids
        before = self.schedule.before
        return tuple(
            (i, j)
            for i in range(len(ids))
            for j in range(i + 1, len(ids))
            if ids[j] not in before.visible_to(ids[i])
            or ids[i] not in before.visible_to(ids[j])
        )

    def to_dict(self):
        return {
            "kind": self.kind,
            "seed": self.seed,
            "ego_id": self.ego_id,
            "config": self.config,
            "game": self.game,
            "schedule": self.schedule,
            "lanes": list(self.lanes),
            "priors": {str(k): v for k, v in self.priors.items()},
        }


def _weights(rng, config: ScenarioConfig, lane: bool = False) -> np.ndarray:
    ranges = [config.goal_weight, config.proximity_weight, config.effort_weight]
    if lane:
        ranges.append(config.lane_weight)
    return np.array([rng.uniform(low, high) for low, high in ranges])


def _features(goal, config: ScenarioConfig, lane: Optional[LaneFeature] = None):
    features = [
        GoalFeature(goal),
        ProximityFeature(config.proximity_epsilon),
        EffortFeature(),
    ]
    if lane is not None:
        features.append(lane)
    return features


def build_three_agent_scenario(
    seed: int, config: Optional[ScenarioConfig] = None
) -> Scenario:
    """Three agents crossing a circle toward antipodal goals

    The agents see each other; an external observer does not see agent 2.
    """
    config = config or ScenarioConfig(kind=THREE_AGENT)
    rng = np.random.default_rng(seed)
    agents = []
    for i in range(3):
        angle = 2 * np.pi * i / 3 + rng.uniform(-0.3, 0.3)
        position = config.radius * np.array([np.cos(angle), np.sin(angle)])
        goal = -position + rng.normal(0.0, config.goal_noise * 0.1, 2)
        agents.append(
            AgentSpec(
                id=i,
                initial_state=np.concatenate([position, np.zeros(2)]),
                features=_features(goal, config),
                weights=_weights(rng, config),
            )
        )

    ids = [0, 1, 2]
    visibility = VisibilityModel(ids, [0, 1], {i: ids for i in ids})
    game = GameSpec(config.dt, config.horizon, agents)
    return Scenario(
        THREE_AGENT,
        seed,
        config,
        game,
        VisibilitySchedule.static(visibility),
        priors={2: np.concatenate([agents[2].initial_state[:2], np.zeros(2)])},
    )


def _sample_positions(rng, count: int, config: ScenarioConfig) -> np.ndarray:
    half = config.region / 2
    for attempt in range(10000):
        positions = rng.uniform(-half, half, size=(count, 2))
        distances = np.linalg.norm(
            positions[:, None, :] - positions[None, :, :], axis=-1
        )
        distances[np.diag_indices(count)] = np.inf
        if distances.min() >= config.min_separation:
            logging.debug("Sampled initial positions after %d attempts", attempt + 1)
            return positions
    raise RuntimeError(
        f"could not place {count} agents {config.min_separation} m apart"
    )


def build_collision_avoidance_scenario(
    num_agents: Optional[int] = None,
    seed: int = 0,
    config: Optional[ScenarioConfig] = None,
) -> Scenario:
    """Agents swapping sides of a square region with random occlusions

    Occlusions are symmetric and lifted at the branching time.
    """
    config = config or ScenarioConfig(kind=COLLISION_AVOIDANCE)
    num_agents = num_agents or config.agent_count
    if num_agents < 2:
        raise ValueError("the collision-avoidance scenario needs two agents")
    rng = np.random.default_rng(seed)

    positions = _sample_positions(rng, num_agents, config)
    half = config.region / 2
    agents = []
    for i, position in enumerate(positions):
        goal = np.clip(-position + rng.normal(0.0, config.goal_noise, 2), -half, half)
        agents.append(
            AgentSpec(
                id=i,
                initial_state=np.concatenate([position, np.zeros(2)]),
                features=_features(goal, config),
                weights=_weights(rng, config),
            )
        )

    sees = np.ones((num_agents, num_agents), dtype=bool)
    for i in range(num_agents):
        for j in range(i + 1, num_agents):
            if rng.uniform() < config.occlusion_probability:
                sees[i, j] = sees[j, i] = False

    ids = list(range(num_agents))
    schedule = VisibilitySchedule(
        VisibilityModel.from_matrix(ids, sees),
        VisibilityModel.full(ids),
        config.reveal_step,
    )
    return Scenario(
        COLLISION_AVOIDANCE,
        seed,
        config,
        GameSpec(config.dt, config.horizon, agents),
        schedule,
    )


def crossing_road_lanes(config: ScenarioConfig) -> Dict[str, LaneFeature]:
    """Centre lines of the two crossing two-lane roads"""
    offset = config.lane_width / 2
    return {
        "north-left": LaneFeature((-offset, 0.0), (0.0, 1.0)),
        "north-right": LaneFeature((offset, 0.0), (0.0, 1.0)),
        "east": LaneFeature((0.0, -offset), (1.0, 0.0)),
        "west": LaneFeature((0.0, offset), (-1.0, 0.0)),
    }


def build_crossing_road_scenario(
    seed: int = 0, config: Optional[ScenarioConfig] = None
) -> Scenario:
    """Ego vehicle next to a visible vehicle, approaching an intersection

    Two vehicles on the horizontal road are hidden from the ego (agent 0) by
    the adjacent vehicle (agent 1) until the branching time. Goals move along
    the lanes.
    """
    config = config or ScenarioConfig(kind=CROSSING_ROAD)
    rng = np.random.default_rng(seed)
    lanes = crossing_road_lanes(config)
    offset = config.lane_width / 2
    start = config.road_length

    layout = [
        # lane, entry point, jitter along the lane
        ("north-right", np.array([offset, -start]), rng.uniform(0.0, 2.0)),
        ("north-left", np.array([-offset, -start]), rng.uniform(3.0, 5.0)),
        ("east", np.array([-start, -offset]), rng.uniform(0.0, 2.0)),
        ("west", np.array([start, offset]), rng.uniform(0.0, 2.0)),
    ]

    agents = []
    priors = {}
    steps = np.arange(config.goal_steps)[:, None]
    for i, (name, entry, jitter) in enumerate(layout):
        lane = lanes[name]
        position = entry + jitter * lane.direction
        speed = config.max_speed * rng.uniform(0.8, 1.0)
        velocity = speed * lane.direction
        goals = position + (steps + config.goal_lookahead) * (
            config.max_speed * config.dt * lane.direction
        )
        agents.append(
            AgentSpec(
                id=i,
                initial_state=np.concatenate([position, velocity]),
                features=_features(goals, config, lane),
                weights=_weights(rng, config, lane=True),
            )
        )
        priors[i] = np.concatenate([entry, np.zeros(2)])

    ids = [0, 1, 2, 3]
    before = VisibilityModel(
        ids, [0, 1], {0: [0, 1], 1: ids, 2: ids, 3: ids}, observer=0
    )
    after = VisibilityModel(ids, ids, {i: ids for i in ids}, observer=0)
    return Scenario(
        CROSSING_ROAD,
        seed,
        config,
        GameSpec(config.dt, config.horizon, agents),
        VisibilitySchedule(before, after, config.reveal_step),
        ego_id=0,
        lanes=list(lanes.values()),
        priors={i: priors[i] for i in (2, 3)},
    )


def build_scenario(config: ScenarioConfig, seed: int) -> Scenario:
    if config.kind == THREE_AGENT:
        return build_three_agent_scenario(seed, config)
    if config.kind == COLLISION_AVOIDANCE:
        return build_collision_avoidance_scenario(config.agent_count, seed, config)
    return build_crossing_road_scenario(seed, config)
