"""Evaluation metrics"""
import itertools
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
from attrs import field, frozen

from .errors import MetricError
from .game import Trajectory


def cosine_dissimilarity(w_true, w_est) -> float:
    """``1 − cos(w_true, w_est)``, in ``[0, 2]``"""
    w_true = np.asarray(w_true, dtype=float)
    w_est = np.asarray(w_est, dtype=float)
    if w_true.shape != w_est.shape:
        raise MetricError(
            "cosine dissimilarity", f"shapes differ ({w_true.shape}, {w_est.shape})"
        )
    norms = np.linalg.norm(w_true) * np.linalg.norm(w_est)
    if norms == 0:
        raise MetricError("cosine dissimilarity", "zero weight vector")
    return float(np.clip(1.0 - (w_true @ w_est) / norms, 0.0, 2.0))


def dissimilarities(
    w_true: Mapping[int, np.ndarray], w_est: Mapping[int, np.ndarray]
) -> Dict[int, float]:
    """Per-agent dissimilarities for the agents present in both mappings"""
    return {
        key: cosine_dissimilarity(w_true[key], w_est[key])
        for key in sorted(w_true)
        if key in w_est
    }


def ade(
    truth: Mapping[int, Trajectory],
    estimate: Mapping[int, Trajectory],
    subset: Iterable[int],
) -> float:
    """Average displacement error over ``subset`` agents and all time indices

    The sum of ``‖p − p̂‖`` is divided by the number of summed terms.
    """
    subset = sorted(set(subset))
    if not subset:
        raise MetricError("ADE", "not applicable (no agent)")
    errors = []
    for agent_id in subset:
        if agent_id not in estimate:
            raise MetricError("ADE", f"not applicable (agent {agent_id} not estimated)")
        true_positions = truth[agent_id].positions
        estimated_positions = estimate[agent_id].positions
        if true_positions.shape != estimated_positions.shape:
            raise MetricError(
                "ADE",
                f"agent {agent_id}: lengths differ ({len(true_positions)},"
                f" {len(estimated_positions)})",
            )
        errors.append(np.linalg.norm(true_positions - estimated_positions, axis=1))
    return float(np.mean(np.concatenate(errors)))


def min_mutual_distance(
    states, pairs: Optional[Iterable[Tuple[int, int]]] = None
) -> float:
    """Smallest distance between two agents over time

    :param states: ``(M, T + 1, 4)`` (or ``(M, T + 1, 2)`` positions) array
    :param pairs: admissible pairs of agent indices (all pairs by default)
    """
    states = np.asarray(states, dtype=float)
    num_agents = states.shape[0]
    if num_agents < 2:
        raise MetricError("minimum distance", "needs at least two agents")
    if pairs is None:
        pairs = itertools.combinations(range(num_agents), 2)
    pairs = list(pairs)
    if not pairs:
        raise MetricError("minimum distance", "no admissible pair")
    return float(
        min(
            np.min(np.linalg.norm(states[i, :, :2] - states[j, :, :2], axis=1))
            for i, j in pairs
        )
    )


def bootstrap_median_ci(
    samples: Sequence[float],
    num_resamples: int = 10000,
    confidence: float = 0.95,
    seed: Optional[int] = 0,
) -> Tuple[float, float, float]:
    """Median with a percentile bootstrap confidence interval"""
    samples = np.asarray(samples, dtype=float)
    if samples.size < 2:
        raise MetricError("bootstrap", "needs at least two samples")
    if not 0 < confidence < 1:
        raise MetricError("bootstrap", f"confidence {confidence} not in (0, 1)")
    rng = np.random.default_rng(seed)
    resamples = rng.choice(samples, size=(num_resamples, samples.size), replace=True)
    medians = np.median(resamples, axis=1)
    alpha = (1.0 - confidence) / 2.0
    lower, upper = np.quantile(medians, [alpha, 1.0 - alpha])
    return float(np.median(samples)), float(lower), float(upper)


def quartiles(samples: Sequence[float]) -> Tuple[float, float, float]:
    """25th percentile, median and 75th percentile"""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise MetricError("quartiles", "no sample")
    q1, q2, q3 = np.quantile(samples, [0.25, 0.5, 0.75])
    return float(q1), float(q2), float(q3)


@frozen(eq=False)
class Summary:
    median: float
    lower: float
    upper: float
    quartiles: Tuple[float, float, float]
    count: int

    @staticmethod
    def of(samples, num_resamples=10000, confidence=0.95, seed=0) -> "Summary":
        samples = [s for s in samples if s is not None and np.isfinite(s)]
        median, lower, upper = bootstrap_median_ci(
            samples, num_resamples, confidence, seed
        )
        return Summary(median, lower, upper, quartiles(samples), len(samples))

    def to_dict(self):
        return {
            "median": self.median,
            "ci": [self.lower, self.upper],
            "quartiles": list(self.quartiles),
            "count": self.count,
        }


@frozen(eq=False)
class MetricReport:
    """Metrics of one estimate or simulation

    Entries that do not apply (e.g. the occluded ADE of an estimator ignoring
    occluded agents) are None.
    """

    dissimilarity: Mapping[int, float] = field(factory=dict)
    ade_visible: Optional[float] = None
    ade_occluded: Optional[float] = None
    d_min: Optional[float] = None
    d_min_occluded: Optional[float] = None
    extra: Mapping[str, float] = field(factory=dict)

    def __attrs_post_init__(self):
        for key, value in self.dissimilarity.items():
            if not 0 <= value <= 2:
                raise ValueError(f"dissimilarity of agent {key} out of [0, 2]")
        for name in ("ade_visible", "ade_occluded", "d_min", "d_min_occluded"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} is negative")

    @property
    def mean_dissimilarity(self) -> Optional[float]:
        if not self.dissimilarity:
            return None
        return float(np.mean(list(self.dissimilarity.values())))

    def to_dict(self):
        return {
            "dissimilarity": {str(k): v for k, v in self.dissimilarity.items()},
            "mean_dissimilarity": self.mean_dissimilarity,
            "ade_visible": self.ade_visible,
            "ade_occluded": self.ade_occluded,
            "d_min": self.d_min,
            "d_min_occluded": self.d_min_occluded,
            **self.extra,
        }
