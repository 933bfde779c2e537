"""Small games shared by the tests"""
import numpy as np

from occlusiongames.features import EffortFeature, GoalFeature, ProximityFeature
from occlusiongames.game import (
    AgentSpec,
    GameSpec,
    VisibilityModel,
    VisibilitySchedule,
)
from occlusiongames.pipeline import World


def agent(id, position, goal, weights=(1.0, 0.5), velocity=(0.0, 0.0), proximity=None):
    features = [GoalFeature(goal), EffortFeature()]
    weights = list(weights)
    if proximity is not None:
        features.insert(1, ProximityFeature(0.1))
        weights.insert(1, proximity)
    return AgentSpec(id, [*position, *velocity], features, weights)


def single_agent_game(horizon=5, dt=0.5, weights=(1.0, 0.5)) -> GameSpec:
    return GameSpec(dt, horizon, [agent(0, (0.0, 0.0), (2.0, 1.0), weights)])


def crossing_game(horizon=6, dt=0.2, proximity=None) -> GameSpec:
    """Two agents swapping places"""
    return GameSpec(
        dt,
        horizon,
        [
            agent(0, (-1.0, 0.0), (1.0, 0.0), proximity=proximity),
            agent(1, (1.0, 0.5), (-1.0, 0.5), proximity=proximity),
        ],
    )


def three_agent_game(horizon=6, dt=0.2, proximity=None) -> GameSpec:
    return GameSpec(
        dt,
        horizon,
        [
            agent(0, (-1.0, 0.0), (1.0, 0.0), proximity=proximity),
            agent(1, (1.0, 0.5), (-1.0, 0.5), proximity=proximity),
            agent(2, (0.0, -1.5), (0.0, 1.5), proximity=proximity),
        ],
    )


def occluded_world(reveal_step=3, horizon=5, dt=0.2) -> World:
    """Agent 2 is hidden from agent 0 until ``reveal_step``"""
    game = three_agent_game(horizon, dt)
    ids = list(game.agent_ids)
    before = VisibilityModel(
        ids, [0, 1], {0: [0, 1], 1: ids, 2: ids}, observer=0
    )
    after = VisibilityModel(ids, ids, {i: ids for i in ids}, observer=0)
    return World(
        game,
        VisibilitySchedule(before, after, reveal_step),
        {2: np.array([0.0, -1.5, 0.0, 0.0])},
    )
