"""Confidence scores from the dispersion of a class-probability vector."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class Metric(str, Enum):
    GC = "gc"
    PPCI = "ppci"
    MAX = "max"


def _check(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] < 2:
        raise ValueError("confidence metrics need J >= 2 classes")
    return p


def normalized_entropy(p) -> np.ndarray | float:
    """Shannon entropy divided by log(J); zero-probability terms contribute 0."""
    p = _check(p)
    safe = np.where(p > 0, p, 1.0)
    h = -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=-1) / np.log(p.shape[-1])
    return h if h.ndim else float(h)


def ppci(p) -> np.ndarray | float:
    """Posterior probability certainty index, 1 - normalised entropy."""
    return 1.0 - normalized_entropy(p)


def gini_coefficient(p) -> np.ndarray | float:
    """Gini coefficient from the Lorentz curve of the descending-sorted probabilities.

    The curve runs piecewise-linearly through (k/J, cumulative mass of the k
    largest). Twice the area between it and the equality line is rescaled by
    J/(J-1) so that a one-hot vector scores exactly 1 and a uniform one 0.
    """
    p = _check(p)
    j = p.shape[-1]
    desc = -np.sort(-p, axis=-1)
    cum = np.cumsum(desc, axis=-1)
    prev = np.concatenate([np.zeros(cum.shape[:-1] + (1,)), cum[..., :-1]], axis=-1)
    area = np.sum(prev + cum, axis=-1) / (2.0 * j)
    g = (2.0 * area - 1.0) * j / (j - 1)
    return g if g.ndim else float(g)


def max_confidence(p) -> np.ndarray | float:
    p = np.asarray(p, dtype=np.float64)
    m = p.max(axis=-1)
    return m if m.ndim else float(m)


_SCORERS = {Metric.GC: gini_coefficient, Metric.PPCI: ppci, Metric.MAX: max_confidence}


def score(p, metric: Metric | str = Metric.GC):
    return _SCORERS[Metric(metric)](p)


@dataclass(frozen=True)
class ConfidenceThreshold:
    tau: float
    metric: Metric = Metric.GC

    def __post_init__(self):
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")
        object.__setattr__(self, "metric", Metric(self.metric))


def is_confident(p, thr: ConfidenceThreshold):
    """True where the score strictly exceeds tau."""
    return score(p, thr.metric) > thr.tau
