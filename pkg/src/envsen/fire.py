"""Wind-biased probabilistic fire spread over an irregular sensor layout.

Burning sites never extinguish. A non-burning site ignites with probability
``1 - prod_j (1 - p_ij)`` over its burning neighbours ``j``, where ``p_ij`` grows
with the alignment between the wind and the ``j -> i`` displacement.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial.distance import pdist, squareform

from .core import FieldState


class EpisodeEnd(RuntimeError):
    """Raised when stepping a field past its scenario horizon."""


def pairwise_distances(positions: np.ndarray) -> np.ndarray:
    return squareform(pdist(np.asarray(positions, dtype=float)))


def default_neighbor_radius(positions: np.ndarray) -> float:
    """1.5x the mean nearest-neighbour spacing of the layout."""
    positions = np.asarray(positions, dtype=float)
    if len(positions) < 2:
        return 1.0
    d = pairwise_distances(positions)
    np.fill_diagonal(d, np.inf)
    return 1.5 * float(d.min(axis=1).mean())


def neighbor_matrix(positions: np.ndarray, radius: float, bridge: bool = False) -> np.ndarray:
    """Sites within ``radius`` of each other; ``bridge`` adds the minimum spanning tree edges.

    Bridging keeps the spread graph connected on sparse random layouts where
    the radius graph alone falls apart into islands.
    """
    d = pairwise_distances(positions)
    adj = d <= radius
    np.fill_diagonal(adj, False)
    if bridge and len(d) > 1:
        mst = minimum_spanning_tree(d).tocoo()
        adj[mst.row, mst.col] = True
        adj[mst.col, mst.row] = True
    return adj


@dataclass(frozen=True)
class FireScenario:
    seed: int
    positions: tuple[tuple[float, float], ...]
    ignition: int
    wind_schedule: tuple[tuple[float, float], ...]  # (direction_deg, speed_mps) for t = 0..horizon
    horizon: int
    spread_rate: float = 0.3
    wind_gain: float = 1.0
    neighbor_radius: float | None = None
    trace: tuple[tuple[int, ...], ...] | None = field(default=None, compare=True)

    def __post_init__(self) -> None:
        object.__setattr__(self, "positions", tuple((float(x), float(y)) for x, y in self.positions))
        object.__setattr__(self, "wind_schedule", tuple((float(d), float(s)) for d, s in self.wind_schedule))
        if self.trace is not None:
            object.__setattr__(self, "trace", tuple(tuple(sorted(int(i) for i in step)) for step in self.trace))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 <= self.spread_rate <= 1.0:
            raise ValueError("spread_rate must lie in [0, 1]")
        if self.wind_gain < 0:
            raise ValueError("wind_gain must be >= 0")
        if not 0 <= self.ignition < len(self.positions):
            raise ValueError(f"ignition site {self.ignition} outside layout of {len(self.positions)}")
        if len(self.wind_schedule) != self.horizon + 1:
            raise ValueError("wind_schedule needs one entry per step 0..horizon")
        if any(s < 0 or not math.isfinite(s) for _, s in self.wind_schedule):
            raise ValueError("wind speeds must be finite and non-negative")
        if self.trace is not None and len(self.trace) != self.horizon + 1:
            raise ValueError("trace needs one burning-set per step 0..horizon")

    @property
    def n(self) -> int:
        return len(self.positions)

    @property
    def radius(self) -> float:
        if self.neighbor_radius is not None:
            return float(self.neighbor_radius)
        return _radius_for(self.positions)

    def neighbors(self) -> np.ndarray:
        """Spread graph: the radius graph, bridged by MST edges when the radius is defaulted."""
        return _geometry_for(self.positions, self.radius, self.neighbor_radius is None)[0]

    def initial_state(self) -> FieldState:
        fire = np.zeros(self.n, dtype=bool)
        if self.trace is not None:
            fire[list(self.trace[0])] = True
        else:
            fire[self.ignition] = True
        return FieldState(0, fire, self.wind_schedule[0])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["positions"] = [list(p) for p in self.positions]
        d["wind_schedule"] = [list(w) for w in self.wind_schedule]
        d["trace"] = None if self.trace is None else [list(s) for s in self.trace]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FireScenario":
        d = dict(d)
        d["positions"] = tuple(tuple(p) for p in d["positions"])
        d["wind_schedule"] = tuple(tuple(w) for w in d["wind_schedule"])
        if d.get("trace") is not None:
            d["trace"] = tuple(tuple(s) for s in d["trace"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "FireScenario":
        return cls.from_dict(json.loads(text))


@lru_cache(maxsize=32)
def _radius_for(positions: tuple) -> float:
    return default_neighbor_radius(np.array(positions))


@lru_cache(maxsize=32)
def _geometry_for(positions: tuple, radius: float, bridge: bool) -> tuple[np.ndarray, np.ndarray]:
    pos = np.array(positions)
    adj = neighbor_matrix(pos, radius, bridge)
    # disp[i, j] = unit vector of the j -> i displacement
    disp = pos[:, None, :] - pos[None, :, :]
    norm = np.linalg.norm(disp, axis=-1, keepdims=True)
    unit = np.divide(disp, norm, out=np.zeros_like(disp), where=norm > 0)
    adj.flags.writeable = False
    unit.flags.writeable = False
    return adj, unit


def _alignment(unit: np.ndarray, wind: tuple[float, float], gain: float) -> np.ndarray | float:
    direction, speed = wind
    if speed > 0 and gain > 0:
        rad = math.radians(direction)
        return np.maximum(0.0, unit @ np.array([math.cos(rad), math.sin(rad)]))
    return 0.0


def spread_probabilities(scenario: FireScenario, wind: tuple[float, float]) -> np.ndarray:
    """Matrix ``p[i, j]`` of per-step ignition probability of ``i`` from burning neighbour ``j``."""
    adj, unit = _geometry_for(scenario.positions, scenario.radius, scenario.neighbor_radius is None)
    align = _alignment(unit, wind, scenario.wind_gain)
    p = np.clip(scenario.spread_rate * (1.0 + scenario.wind_gain * align), 0.0, 1.0)
    return np.where(adj, p, 0.0)


@lru_cache(maxsize=32)
def _edges_for(positions: tuple, radius: float, bridge: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    adj, unit = _geometry_for(positions, radius, bridge)
    rows, cols = np.nonzero(adj)
    return rows, cols, unit[rows, cols]


def ignition_probabilities(scenario: FireScenario, burning: np.ndarray, wind: tuple[float, float]) -> np.ndarray:
    """Per-site probability of catching fire this step, ``1 - prod_j (1 - p_ij)`` over burning ``j``."""
    rows, cols, unit = _edges_for(scenario.positions, scenario.radius, scenario.neighbor_radius is None)
    active = burning[cols]
    rows, unit = rows[active], unit[active]
    p = np.clip(scenario.spread_rate * (1.0 + scenario.wind_gain * _alignment(unit, wind, scenario.wind_gain)), 0.0, 1.0)
    survive = np.ones(scenario.n)
    np.multiply.at(survive, rows, 1.0 - p)
    return 1.0 - survive


def step_fire(state: FieldState, scenario: FireScenario, rng: np.random.Generator) -> FieldState:
    if state.t >= scenario.horizon:
        raise EpisodeEnd(f"t={state.t} reached horizon {scenario.horizon}")
    t1 = state.t + 1
    if scenario.trace is not None:
        fire = np.zeros(scenario.n, dtype=bool)
        fire[list(scenario.trace[t1])] = True
        return FieldState(t1, fire | state.fire, scenario.wind_schedule[t1])
    ignite_prob = ignition_probabilities(scenario, state.fire, state.wind)
    draws = rng.random(scenario.n)  # one draw per site every step: fixed rng consumption
    fire = state.fire | (draws < ignite_prob)
    return FieldState(t1, fire, scenario.wind_schedule[t1])


def rollout(scenario: FireScenario, rng: np.random.Generator | None = None) -> np.ndarray:
    """Full ground-truth trajectory as a ``(horizon + 1, N)`` boolean array."""
    if rng is None:
        rng = np.random.default_rng(scenario.seed)
    state = scenario.initial_state()
    out = np.empty((scenario.horizon + 1, scenario.n), dtype=bool)
    out[0] = state.fire
    for t in range(scenario.horizon):
        state = step_fire(state, scenario, rng)
        out[t + 1] = state.fire
    return out


@dataclass(frozen=True)
class ScenarioRanges:
    wind_speed: tuple[float, float] = (0.0, 10.0)
    direction_drift_deg: float = 10.0  # std of per-step direction random walk
    speed_drift: float = 0.5  # std of per-step speed random walk
    spread_rate: tuple[float, float] = (0.3, 0.3)
    wind_gain: tuple[float, float] = (1.0, 1.0)


def generate_scenarios(
    count: int,
    base_seed: int,
    positions: np.ndarray,
    horizon: int,
    ranges: ScenarioRanges = ScenarioRanges(),
    neighbor_radius: float | None = None,
) -> list[FireScenario]:
    """Draw ``count`` scenarios with random ignition site and drifting wind."""
    if count < 1:
        raise ValueError("count must be >= 1")
    positions = np.asarray(positions, dtype=float)
    if positions.size == 0:
        raise ValueError("empty site layout")
    pos = tuple(map(tuple, positions.tolist()))
    n = len(pos)
    rng = np.random.default_rng(base_seed)
    lo, hi = ranges.wind_speed
    out = []
    for _ in range(count):
        ignition = int(rng.integers(n))
        direction = float(rng.uniform(0.0, 360.0))
        speed = float(rng.uniform(lo, hi))
        schedule = []
        for _t in range(horizon + 1):
            schedule.append((direction % 360.0, speed))
            direction += float(rng.normal(0.0, ranges.direction_drift_deg))
            speed = float(np.clip(speed + rng.normal(0.0, ranges.speed_drift), lo, hi))
        out.append(
            FireScenario(
                seed=int(rng.integers(2**63)),
                positions=pos,
                ignition=ignition,
                wind_schedule=tuple(schedule),
                horizon=horizon,
                spread_rate=float(rng.uniform(*ranges.spread_rate)),
                wind_gain=float(rng.uniform(*ranges.wind_gain)),
                neighbor_radius=neighbor_radius,
            )
        )
    return out
