"""Exceptions raised by occlusiongames

Non-convergence of a solver is never an exception: results carry a
``converged`` flag and diagnostics instead.
"""
from typing import Any, Iterable, List, Optional


class GameError(Exception):
    """Base class for all errors raised by the package"""


class DimensionError(GameError, ValueError):
    """Array or sequence lengths do not match what the game expects"""

    def __init__(self, what: str, expected: Any, actual: Any):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


class NonFiniteError(GameError, ArithmeticError):
    """A NaN or infinite value appeared in an input or in a solver iterate"""

    def __init__(
        self, where: str, iterate: Optional[Any] = None, iteration: Optional[int] = None
    ):
        self.where = where
        self.iterate = iterate
        self.iteration = iteration
        message = f"non-finite value in {where}"
        if iteration is not None:
            message += f" (iteration {iteration})"
        super().__init__(message)


class ConfigError(GameError):
    """A configuration file could not be parsed or validated"""

    def __init__(self, problems: Iterable[str], path: Optional[Any] = None):
        self.problems: List[str] = list(problems)
        self.path = path
        prefix = f"{path}: " if path is not None else ""
        super().__init__(prefix + "; ".join(self.problems))


class ContingencyError(GameError, ValueError):
    """The hypothesis games of a contingency game are inconsistent"""

    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


class UnknownHypothesisError(GameError, KeyError):
    def __init__(self, tag: str, known: Iterable[str]):
        self.tag = tag
        self.known = tuple(known)
        super().__init__(f"unknown hypothesis {tag!r} (known: {', '.join(self.known)})")

    def __str__(self):
        return self.args[0]


class ObservationError(GameError, ValueError):
    """Observations are unusable for estimation"""


class MetricError(GameError, ValueError):
    """A metric is not defined for its inputs"""

    def __init__(self, metric: str, reason: str):
        self.metric = metric
        self.reason = reason
        super().__init__(f"{metric}: {reason}")


class SampleError(GameError):
    """One stage of an experiment sample raised an error"""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
