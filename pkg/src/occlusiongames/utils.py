import hashlib
import json
import logging
from pathlib import PosixPath
from typing import Any, Optional, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError


# --- Arrays


def frozen_array(
    value: Any, shape: Optional[Sequence[Optional[int]]] = None, what: str = "array"
) -> np.ndarray:
    """Copy ``value`` into a read-only float array, checking shape and finiteness

    A ``None`` entry in ``shape`` matches any size along that axis.
    """
    array = np.array(value, dtype=float)
    if shape is not None:
        if array.ndim != len(shape) or any(
            expected is not None and actual != expected
            for expected, actual in zip(shape, array.shape)
        ):
            raise DimensionError(what, tuple(shape), array.shape)
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(what)
    array.setflags(write=False)
    return array


# --- JSON


class BaseJSONEncoder(json.JSONEncoder):
    def __init__(self, **kwargs):
        kwargs.setdefault("sort_keys", False)
        super().__init__(**kwargs)

    def default(self, o):
        return {
            key: value for key, value in o.__dict__.items() if not key.startswith("_")
        }


class JsonEncoder(BaseJSONEncoder):
    """Default JSON encoder

    Objects exposing ``to_dict()`` are encoded through it; numpy values become
    plain lists and numbers.
    """

    def default(self, o):
        if isinstance(o, PosixPath):
            return str(o)

        if isinstance(o, np.ndarray):
            return o.tolist()

        if isinstance(o, np.generic):
            return o.item()

        if isinstance(o, (set, frozenset)):
            return sorted(o)

        if hasattr(o, "to_dict"):
            return o.to_dict()

        return super().default(o)


def dumps(o, **kwargs) -> str:
    return JsonEncoder(**kwargs).encode(o)


def canonical_json(o) -> str:
    """Key-sorted compact JSON, used for hashing"""
    return JsonEncoder(sort_keys=True, separators=(",", ":")).encode(o)


def config_hash(o) -> str:
    """SHA-256 of the canonical JSON form of a configuration"""
    digest = hashlib.sha256(canonical_json(o).encode("utf-8")).hexdigest()
    logging.debug("Configuration hash %s", digest)
    return digest
