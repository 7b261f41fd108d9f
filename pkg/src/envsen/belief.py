"""Gateway belief function, model loss and the data-value metric.

The belief is binary and updated by overwriting reported sites with the
reported bit, so a report only ever corrects its own site.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .core import BeliefState, DimensionError, FieldState, error_loss

PERSISTENCE = "persistence"
NEIGHBOR_PROPAGATION = "neighbor-propagation"


@dataclass(frozen=True, eq=False)
class BeliefModel:
    kind: str = PERSISTENCE
    threshold: float = 0.5
    neighbors: np.ndarray | None = None  # (N, N) bool adjacency, needed for neighbor-propagation

    def __post_init__(self) -> None:
        if self.kind not in (PERSISTENCE, NEIGHBOR_PROPAGATION):
            raise ValueError(f"unknown belief model {self.kind!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.kind == NEIGHBOR_PROPAGATION:
            if self.neighbors is None:
                raise ValueError("neighbor-propagation needs a neighbor adjacency matrix")
            adj = np.asarray(self.neighbors, dtype=bool)
            object.__setattr__(self, "neighbors", adj)
            object.__setattr__(self, "_degree", adj.sum(axis=1))


def predict(model: BeliefModel, belief: np.ndarray | BeliefState) -> np.ndarray:
    """Belief at the next step given no new reports (the pre-update vector)."""
    prior = belief.belief if isinstance(belief, BeliefState) else np.asarray(belief, dtype=bool)
    z = prior.copy()
    if model.kind == NEIGHBOR_PROPAGATION:
        if model.neighbors.shape != (len(z), len(z)):
            raise DimensionError("neighbor matrix does not match belief length")
        burning = model.neighbors @ prior.astype(np.int64)
        degree = model._degree
        frac = np.divide(burning, degree, out=np.zeros(len(z)), where=degree > 0)
        z |= (burning > 0) & (frac >= model.threshold)
    return z


def apply_reports(pre_update: np.ndarray, received: Mapping[int, bool]) -> np.ndarray:
    y = np.array(pre_update, dtype=bool)
    n = len(y)
    for i, bit in received.items():
        if not 0 <= i < n:
            raise IndexError(f"report from unknown site {i}")
        y[i] = bool(bit)
    return y


def advance_belief(
    model: BeliefModel,
    belief: BeliefState,
    received: Mapping[int, bool],
    pre_update: np.ndarray | None = None,
) -> BeliefState:
    """One gateway step: extrapolate, then overwrite reported sites.

    ``pre_update`` may be passed when it was already computed with ``predict``.
    """
    z = predict(model, belief) if pre_update is None else np.asarray(pre_update, dtype=bool)
    return BeliefState(belief.t + 1, apply_reports(z, received), z)


def model_loss(truth, belief: BeliefState, weights=None) -> float:
    return error_loss(truth, belief.pre_update, weights)


def _truth_bits(truth) -> np.ndarray:
    return truth.fire if isinstance(truth, FieldState) else np.asarray(truth, dtype=bool)


def data_values(truth, belief: BeliefState | np.ndarray, weights=None) -> np.ndarray:
    """Vector of per-site data values ``weight * [x != z]``."""
    x = _truth_bits(truth)
    z = belief.pre_update if isinstance(belief, BeliefState) else np.asarray(belief, dtype=bool)
    if x.shape != z.shape:
        raise DimensionError("truth and belief lengths differ")
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=float)
    return np.where(x != z, w, 0.0)


def data_value(i: int, truth, belief: BeliefState, weights=None) -> float:
    x = _truth_bits(truth)
    if x[i] == belief.pre_update[i]:
        return 0.0
    return 1.0 if weights is None else float(weights[i])


def data_value_set(ids: Iterable[int], truth, belief: BeliefState, weights=None) -> float:
    return math.fsum(data_value(i, truth, belief, weights) for i in ids)


def mismatch_set(truth, belief: BeliefState) -> frozenset[int]:
    """Sites whose true bit differs from the pre-update belief."""
    return frozenset(np.flatnonzero(_truth_bits(truth) != belief.pre_update).tolist())
