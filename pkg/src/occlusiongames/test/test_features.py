import numpy as np
import pytest

from occlusiongames.errors import DimensionError
from occlusiongames.features import (
    CostFeature,
    EffortFeature,
    GoalFeature,
    LaneFeature,
    ProximityFeature,
    feature_derivatives,
    feature_value,
    running_cost,
)

from .games import crossing_game

FEATURES = [
    GoalFeature([1.0, -2.0]),
    GoalFeature(np.linspace(0, 5, 20).reshape(10, 2), offset=1),
    ProximityFeature(0.1),
    EffortFeature(),
    LaneFeature([1.0, 0.0], [1.0, 1.0]),
]


def _stacked(joint_state, control):
    return np.concatenate([joint_state.ravel(), control])


def _split(z, num_agents):
    return z[: 4 * num_agents].reshape(num_agents, 4), z[4 * num_agents :]


@pytest.mark.parametrize("feature", FEATURES, ids=lambda f: f.KIND)
@pytest.mark.parametrize("ego", [0, 2])
def test_derivatives_finite_differences(feature, ego):
    rng = np.random.default_rng(1)
    joint_state = rng.normal(size=(3, 4))
    control = rng.normal(size=2)
    z = _stacked(joint_state, control)
    grad, hess = feature_derivatives(feature, joint_state, control, ego, k=3)

    h = 1e-6
    numerical_grad = np.zeros_like(z)
    numerical_hess = np.zeros((len(z), len(z)))
    for i in range(len(z)):
        dz = np.zeros_like(z)
        dz[i] = h
        plus, minus = _split(z + dz, 3), _split(z - dz, 3)
        numerical_grad[i] = (
            feature_value(feature, *plus, ego, 3)
            - feature_value(feature, *minus, ego, 3)
        ) / (2 * h)
        numerical_hess[:, i] = (
            feature_derivatives(feature, *plus, ego, 3)[0]
            - feature_derivatives(feature, *minus, ego, 3)[0]
        ) / (2 * h)

    assert np.allclose(grad, numerical_grad, atol=1e-5)
    assert np.allclose(hess, numerical_hess, atol=1e-4)
    assert np.allclose(hess, hess.T)


def test_proximity_is_finite_at_collision():
    joint_state = np.zeros((2, 4))
    value = feature_value(ProximityFeature(0.5), joint_state, np.zeros(2), 0)
    assert value == pytest.approx(2.0)


def test_lane_deviation():
    lane = LaneFeature([2.0, 0.0], [0.0, 3.0])
    joint_state = np.array([[5.0, 10.0, 0.0, 0.0]])
    assert lane.value(joint_state, np.zeros(2), 0) == pytest.approx(9.0)


def test_input_dimensions():
    with pytest.raises(DimensionError):
        feature_value(EffortFeature(), np.zeros((2, 3)), np.zeros(2), 0)
    with pytest.raises(DimensionError):
        feature_value(EffortFeature(), np.zeros((2, 4)), np.zeros(3), 0)


def test_feature_dict():
    for feature in FEATURES:
        loaded = CostFeature.from_dict(feature.to_dict())
        assert type(loaded) is type(feature)
        joint_state = np.ones((3, 4))
        assert loaded.value(joint_state, np.ones(2), 0, 2) == pytest.approx(
            feature.value(joint_state, np.ones(2), 0, 2)
        )

    with pytest.raises(KeyError):
        CostFeature.from_dict({"kind": "speed"})


def test_running_cost_is_weighted_sum():
    game = crossing_game()
    states = game.initial_states
    controls = np.array([[1.0, 0.0], [0.0, 2.0]])
    # goal: (−1 − 1)², effort: 1
    cost = running_cost(game, 0, states, controls, 1)
    assert cost == pytest.approx(1.0 * 4 + 0.5 * 1)
