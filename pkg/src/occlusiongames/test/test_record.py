import pickle

import numpy as np
import pytest

from occlusiongames.nash import solve_olne
from occlusiongames.record import (
    ContingencyPlanItem,
    ControlItem,
    FailureItem,
    FailureRecord,
    NashPlanItem,
    PlanItem,
    Record,
    TimingItem,
    WarmupRecord,
    WorldStateItem,
)

from .games import single_agent_game

#: Steps where the ego follows a Nash plan
NashRecord = WarmupRecord.sub(NashPlanItem)
PlanRecord = WarmupRecord.sub(PlanItem)


@pytest.fixture(scope="module")
def nash_plan():
    return NashPlanItem(False, solve_olne(single_agent_game()))


def _world(k=0):
    return WorldStateItem(k, np.zeros((1, 4)))


def _controls():
    return ControlItem(np.ones((1, 2)))


def test_record_items(nash_plan):
    world = _world(2)
    r = NashRecord(world, _controls(), TimingItem(), nash_plan)
    assert r[WorldStateItem] is world
    assert r[PlanItem] is nash_plan
    assert r[NashPlanItem] is nash_plan
    assert r.get(ContingencyPlanItem) is None
    with pytest.raises(KeyError):
        r[ContingencyPlanItem]


def test_record_missing_item(nash_plan):
    with pytest.raises(KeyError):
        WarmupRecord(_world(), _controls())

    with pytest.raises(KeyError):
        # A plan is not part of a warm-up step
        WarmupRecord(_world(), _controls(), TimingItem(), nash_plan)


def test_record_duplicate_item():
    with pytest.raises(RuntimeError):
        Record(_world(0), _world(1), _controls())


def test_record_update(nash_plan):
    r = WarmupRecord(_world(), _controls(), TimingItem())
    r2 = r.update(nash_plan, ControlItem(np.zeros((1, 2))))
    assert r is not r2
    assert not r.has(PlanItem)
    assert r2[PlanItem] is nash_plan
    assert np.array_equal(r2[ControlItem].controls, np.zeros((1, 2)))
    NashRecord.validate(r2)


def test_record_types():
    assert NashRecord.contains(PlanRecord)
    assert not PlanRecord.contains(NashRecord)
    assert not NashRecord.contains(WarmupRecord)
    assert PlanRecord.has(PlanItem)
    assert not PlanRecord.has(NashPlanItem)
    assert WarmupRecord.has(ControlItem)
    assert not WarmupRecord.has(FailureItem)


def test_record_pickled(nash_plan):
    r = NashRecord(_world(3), _controls(), TimingItem({"planning": 0.5}), nash_plan)
    r = pickle.loads(pickle.dumps(r))

    assert r[WorldStateItem].k == 3
    assert r[NashPlanItem].converged
    assert r[TimingItem].seconds == {"planning": 0.5}


def test_record_dict(nash_plan):
    r = NashRecord(_world(3), _controls(), TimingItem({"truth": 0.1}), nash_plan)
    data = r.to_dict(exclude=(TimingItem,))
    assert set(data) == {"world", "controls", "plan"}
    assert data["world"]["k"] == 3
    assert data["plan"]["kind"] == "nash"
    assert data["plan"]["fallback"] is False
    assert r.to_dict()["timing"] == {"truth": 0.1}


def test_failure_record():
    failure = FailureRecord(
        _world(), FailureItem("planning", "NonFiniteError", "nan"), TimingItem()
    )
    assert failure.has(FailureItem)
    assert not failure.has(ControlItem)
    assert failure.to_dict()["failure"] == {
        "stage": "planning",
        "error": "NonFiniteError",
        "message": "nan",
    }
