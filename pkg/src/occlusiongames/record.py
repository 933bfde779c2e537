"""Per-step simulation records

A record is a composition of items where each item base class appears at
most once; a record type lists the item types a record must hold, and can be
specialised with `RecordType.sub`.
"""
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar, Union

import numpy as np
from attrs import define, field

from .contingency import ContingencyPlan
from .game import SolverResult
from .inverse import EstimateResult, ObservationSequence


class Item:
    """Base class for all item types"""

    #: Key of the item in serialized records
    KEY = "item"

    @classmethod
    def __get_base__(cls: Type) -> Type:
        """Get the most generic superclass for this type of item"""
        if base := cls.__dict__.get("__base__cache__", None):
            return base

        base = cls
        for supercls in cls.__mro__:
            if issubclass(supercls, Item) and supercls is not Item:
                base = supercls
        setattr(cls, "__base__cache__", base)
        return base

    def to_dict(self) -> Dict[str, Any]:
        raise NotImplementedError()


T = TypeVar("T", bound=Item)
Items = Dict[Type[T], T]


class RecordType:
    def __init__(self, *item_types: Type[T]):
        self.item_types = frozenset(item_types)
        self.mapping = {item_type.__get_base__(): item_type for item_type in item_types}

    def __repr__(self):
        return f"""Record({",".join(sorted(item_type.__name__ for item_type in
                self.item_types))})"""

    def contains(self, other: "RecordType"):
        """Checks that each item type in other has an item type of a compatible
        type in self"""
        if len(self.item_types) != len(other.item_types):
            return False

        for item_type in other.item_types:
            if matching_type := self.mapping.get(item_type.__get_base__(), None):
                if not issubclass(matching_type, item_type):
                    return False
            else:
                return False

        return True

    def sub(self, *item_types: Type[T]):
        """Returns a new record type based on self and new item types"""
        cls_itemtypes = list(self.item_types)
        mapping = {
            itemtype.__get_base__(): ix for ix, itemtype in enumerate(cls_itemtypes)
        }

        for itemtype in item_types:
            if (ix := mapping.get(itemtype.__get_base__(), -1)) >= 0:
                cls_itemtypes[ix] = itemtype
            else:
                cls_itemtypes.append(itemtype)

        return record_type(*cls_itemtypes)

    def __call__(self, *items: T):
        record = Record(*items)
        self.validate(record)
        return record

    def has(self, itemtype: Type[T]):
        base = itemtype.__get_base__()
        return base in self.mapping and issubclass(self.mapping[base], itemtype)

    def validate(self, record: "Record"):
        """Checks that a record holds exactly the items of this type"""
        for item_type in self.item_types:
            try:
                record[item_type]
            except KeyError:
                raise KeyError(f"Item of type {item_type.__name__} is missing")

        if len(record.items) != len(self.item_types):
            unregistered = [
                item
                for base, item in record.items.items()
                if base not in self.mapping
            ]
            raise KeyError(
                f"The record of type {self} contains unregistered items: {unregistered}"
            )

        return record


def record_type(*item_types: Type[T]):
    """Returns a new record type"""
    return RecordType(*item_types)


class Record:
    """Associate types with entries

    A record is a composition of items; each item base class is unique.
    """

    #: Items for this record
    items: Items

    def __init__(self, *items: Union[Items, T], override=False):
        self.items = {}

        if len(items) == 1 and isinstance(items[0], dict):
            self.items = items[0]
        else:
            for entry in items:
                base = entry.__get_base__()
                if not override and base in self.items:
                    raise RuntimeError(
                        f"The item type {base.__name__} ({entry.__class__.__name__})"
                        " is already in the record"
                    )
                self.items[base] = entry

    def __str__(self):
        return (
            "{"
            + ", ".join(f"{key.__name__}: {value}" for key, value in self.items.items())
            + "}"
        )

    def get(self, key: Type[T]) -> Optional[T]:
        """Get a given item or None if it does not exist"""
        try:
            return self[key]
        except KeyError:
            return None

    def has(self, key: Type[T]) -> bool:
        """Returns True if the record has an item of the given type"""
        return self.get(key) is not None

    def __getitem__(self, key: Type[T]) -> T:
        """Get an item given its type"""
        base = key.__get_base__()
        entry = self.items[base]

        if not isinstance(entry, key):
            raise KeyError(f"No entry with type {key.__name__}")
        return entry

    def update(self, *items: T) -> "Record":
        """Returns a new record with some items replaced or added"""
        item_dict = {**self.items}
        for item in items:
            item_dict[item.__get_base__()] = item

        return Record(item_dict)

    def to_dict(self, exclude: Tuple[Type[Item], ...] = ()) -> Dict[str, Any]:
        """Serializable form, one key per item (items of ``exclude`` are skipped)"""
        return {
            item.KEY: item.to_dict()
            for base, item in sorted(self.items.items(), key=lambda kv: kv[1].KEY)
            if not isinstance(item, exclude)
        }


# --- Items of the simulation steps


@define
class WorldStateItem(Item):
    """True joint state ``(M, 4)`` at step ``k``, before the controls apply"""

    KEY = "world"

    k: int
    states: np.ndarray = field(converter=lambda x: np.array(x, dtype=float))

    def to_dict(self):
        return {"k": self.k, "states": self.states}


@define
class ObservationItem(Item):
    KEY = "observations"

    observations: ObservationSequence

    def to_dict(self):
        return self.observations.to_dict()


@define
class EstimateItem(Item):
    KEY = "estimate"

    estimate: EstimateResult

    def to_dict(self):
        return self.estimate.to_dict()


@define
class PlanItem(Item):
    """The plan of the ego at a step

    ``fallback`` is set when the plan did not converge and the previous plan
    was applied instead.
    """

    KEY = "plan"

    fallback: bool

    @property
    def converged(self) -> bool:
        raise NotImplementedError()

    @property
    def iterations(self) -> int:
        raise NotImplementedError()

    def ego_controls(self, ego_id: int) -> np.ndarray:
        """Planned controls of the ego over the horizon"""
        raise NotImplementedError()


@define
class ContingencyPlanItem(PlanItem):
    plan: ContingencyPlan
    #: Hypothesis whose branch the ego follows once the branching step passed
    revealed: str

    @property
    def converged(self) -> bool:
        return self.plan.converged

    @property
    def iterations(self) -> int:
        return self.plan.iterations

    def ego_controls(self, ego_id: int) -> np.ndarray:
        return np.concatenate(
            [self.plan.shared_controls, self.plan.branch_controls(self.revealed)]
        )

    def to_dict(self):
        return {"kind": "contingency", "fallback": self.fallback, **self.plan.to_dict()}


@define
class NashPlanItem(PlanItem):
    result: SolverResult

    @property
    def converged(self) -> bool:
        return self.result.converged

    @property
    def iterations(self) -> int:
        return self.result.iterations

    def ego_controls(self, ego_id: int) -> np.ndarray:
        return self.result.trajectory(ego_id).controls

    def to_dict(self):
        return {"kind": "nash", "fallback": self.fallback, **self.result.to_dict()}


@define
class AgentPlansItem(Item):
    """Solve outcomes when every agent plans for itself (by agent id)"""

    KEY = "plans"

    converged: Mapping[int, bool]
    iterations: Mapping[int, int]
    fallback: Mapping[int, bool]

    def to_dict(self):
        return {
            str(key): {
                "converged": self.converged[key],
                "iterations": self.iterations[key],
                "fallback": self.fallback[key],
            }
            for key in sorted(self.converged)
        }


@define
class ControlItem(Item):
    """Controls ``(M, 2)`` applied by all agents at the step"""

    KEY = "controls"

    controls: np.ndarray = field(converter=lambda x: np.array(x, dtype=float))

    def to_dict(self):
        return {"controls": self.controls}


@define
class TimingItem(Item):
    """Wall-clock durations of the step stages, in seconds"""

    KEY = "timing"

    seconds: Mapping[str, float] = field(factory=dict)

    def to_dict(self):
        return dict(self.seconds)


@define
class FailureItem(Item):
    KEY = "failure"

    stage: str
    error: str
    message: str

    def to_dict(self):
        return {"stage": self.stage, "error": self.error, "message": self.message}


#: Steps where the ego does not plan yet
WarmupRecord = record_type(WorldStateItem, ControlItem, TimingItem)

#: Estimation and planning steps
PlanningRecord = WarmupRecord.sub(ObservationItem, EstimateItem, PlanItem)

#: Steps of a simulation where every agent plans with its own visibility
AgentPlanningRecord = WarmupRecord.sub(AgentPlansItem)

#: Last record of a truncated simulation
FailureRecord = record_type(WorldStateItem, FailureItem, TimingItem)
