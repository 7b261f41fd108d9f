"""Shared domain types plus the error-loss, energy-cost and reward metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


class DimensionError(ValueError):
    """Two per-site vectors disagree in length."""


@dataclass(frozen=True)
class SensorSite:
    id: int
    position: tuple[float, float]
    energy_cost: float = 1.0
    data_value_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.energy_cost <= 0:
            raise ValueError(f"site {self.id}: energy_cost must be > 0")
        if not all(math.isfinite(c) for c in self.position):
            raise ValueError(f"site {self.id}: position must be finite")


def make_sites(
    positions: np.ndarray,
    energy_cost: float | Sequence[float] = 1.0,
    weights: float | Sequence[float] = 1.0,
) -> list[SensorSite]:
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    costs = np.broadcast_to(np.asarray(energy_cost, dtype=float), (n,))
    ws = np.broadcast_to(np.asarray(weights, dtype=float), (n,))
    return [
        SensorSite(i, (float(positions[i, 0]), float(positions[i, 1])), float(costs[i]), float(ws[i]))
        for i in range(n)
    ]


def check_sites(sites: Sequence[SensorSite]) -> None:
    for k, site in enumerate(sites):
        if site.id != k:
            raise ValueError(f"site ids must be contiguous from 0; position {k} holds id {site.id}")


def site_positions(sites: Sequence[SensorSite]) -> np.ndarray:
    return np.array([s.position for s in sites], dtype=float).reshape(len(sites), 2)


def site_costs(sites: Sequence[SensorSite]) -> np.ndarray:
    return np.array([s.energy_cost for s in sites], dtype=float)


def site_weights(sites: Sequence[SensorSite]) -> np.ndarray:
    return np.array([s.data_value_weight for s in sites], dtype=float)


def _frozen_bits(bits) -> np.ndarray:
    arr = np.array(bits, dtype=bool).reshape(-1)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class FieldState:
    """Ground truth at step ``t``: burning indicator per site and a uniform wind vector."""

    t: int
    fire: np.ndarray
    wind: tuple[float, float] = (0.0, 0.0)  # (direction_deg, speed_mps)

    def __post_init__(self) -> None:
        object.__setattr__(self, "fire", _frozen_bits(self.fire))
        direction, speed = self.wind
        if not (math.isfinite(speed) and speed >= 0 and math.isfinite(direction)):
            raise ValueError(f"invalid wind {self.wind}")
        if self.t < 0:
            raise ValueError("t must be non-negative")

    @property
    def n(self) -> int:
        return len(self.fire)

    @property
    def wind_vector(self) -> np.ndarray:
        direction, speed = self.wind
        rad = math.radians(direction)
        return np.array([speed * math.cos(rad), speed * math.sin(rad)])

    def site_wind(self) -> np.ndarray:
        """Per-site (N, 2) wind vectors; wind is spatially uniform."""
        return np.tile(self.wind_vector, (self.n, 1))


@dataclass(frozen=True, eq=False)
class BeliefState:
    """Gateway belief after step ``t`` and the belief it held before step-``t`` reports."""

    t: int
    belief: np.ndarray
    pre_update: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "belief", _frozen_bits(self.belief))
        object.__setattr__(self, "pre_update", _frozen_bits(self.pre_update))
        if len(self.belief) != len(self.pre_update):
            raise DimensionError("belief and pre_update lengths differ")

    @classmethod
    def initial(cls, n: int) -> "BeliefState":
        zeros = np.zeros(n, dtype=bool)
        return cls(0, zeros, zeros)

    @property
    def n(self) -> int:
        return len(self.belief)


@dataclass(frozen=True)
class TransmissionRound:
    attempted: frozenset[int]
    succeeded: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        object.__setattr__(self, "attempted", frozenset(int(i) for i in self.attempted))
        object.__setattr__(self, "succeeded", frozenset(int(i) for i in self.succeeded))
        if not self.succeeded <= self.attempted:
            raise ValueError("succeeded must be a subset of attempted")

    @property
    def per_attempt_outcome(self) -> dict[int, bool]:
        return {i: i in self.succeeded for i in sorted(self.attempted)}

    def check_ids(self, n: int) -> None:
        if any(i < 0 or i >= n for i in self.attempted):
            raise IndexError(f"transmission ids outside [0, {n})")

    @classmethod
    def from_masks(cls, attempted: np.ndarray, succeeded: np.ndarray) -> "TransmissionRound":
        return cls(frozenset(np.flatnonzero(attempted).tolist()), frozenset(np.flatnonzero(succeeded).tolist()))


def _bits_of(x) -> np.ndarray:
    if isinstance(x, FieldState):
        return x.fire
    if isinstance(x, BeliefState):
        return x.belief
    return np.asarray(x, dtype=bool).reshape(-1)


def error_loss(truth, belief, weights: Sequence[float] | np.ndarray | None = None) -> float:
    """Weighted Hamming distance between the true field and a belief vector.

    ``truth`` may be a FieldState or a bit vector; ``belief`` a BeliefState (its
    post-update vector is used) or a bit vector.
    """
    x = _bits_of(truth)
    y = _bits_of(belief)
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    mismatch = x != y
    if weights is None:
        return float(np.count_nonzero(mismatch))
    w = np.asarray(weights, dtype=float)
    if w.shape != x.shape:
        raise DimensionError("weights length mismatch")
    return math.fsum(w[mismatch])


def _cost_lookup(sites_or_costs) -> np.ndarray:
    if len(sites_or_costs) and isinstance(sites_or_costs[0], SensorSite):
        return site_costs(sites_or_costs)
    return np.asarray(sites_or_costs, dtype=float)


def energy_cost(attempted: Iterable[int], sites) -> float:
    costs = _cost_lookup(sites)
    total = []
    for i in attempted:
        if not 0 <= i < len(costs):
            raise IndexError(f"unknown sensor id {i}")
        total.append(costs[i])
    return math.fsum(total)


def step_reward(round: TransmissionRound, values: Mapping[int, float] | Sequence[float], sites, w: float) -> float:
    """Realized step reward: sum over attempted ids of outcome*value - w*cost."""
    if w < 0:
        raise ValueError("w must be non-negative")
    costs = _cost_lookup(sites)
    terms = []
    for i in sorted(round.attempted):
        try:
            v = values[i]
        except (KeyError, IndexError):
            raise ValueError(f"no data value for attempted sensor {i}") from None
        if not 0 <= i < len(costs):
            raise IndexError(f"unknown sensor id {i}")
        terms.append((float(v) if i in round.succeeded else 0.0) - w * costs[i])
    return math.fsum(terms)
