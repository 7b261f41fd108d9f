"""Analytic and baseline transmission policies.

``values`` are per-sensor data values and ``costs`` are already-weighted
energy costs ``w * c_i``. ``P`` is any callable giving the per-packet success
probability when ``n`` sensors transmit; it must be non-increasing in ``n``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.stats import binom

SuccessFn = Callable[[int], float]

GRID_STEP = 1e-4
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class PreconditionError(ValueError):
    """Inputs violate the assumptions under which a policy is optimal."""


def set_objective(ids, values, costs, P: SuccessFn) -> float:
    """Expected step reward ``sum_{i in I} P(|I|) v_i - wc_i`` of transmitting set ``I``."""
    ids = list(ids)
    if not ids:
        return 0.0
    p = P(len(ids))
    return math.fsum(p * float(values[i]) - float(costs[i]) for i in ids)


def brute_force_optimum(values, costs, P: SuccessFn, max_n: int = 20) -> tuple[frozenset[int], float]:
    """Exhaustive search over all subsets; works for unequal costs."""
    n = len(values)
    if n > max_n:
        raise PreconditionError(f"brute force limited to N <= {max_n}, got {n}")
    best, best_val = frozenset(), 0.0
    for size in range(1, n + 1):
        for combo in itertools.combinations(range(n), size):
            val = set_objective(combo, values, costs, P)
            if val > best_val:
                best, best_val = frozenset(combo), val
    return best, best_val


def _ranked(values: np.ndarray, costs: np.ndarray, p: float) -> tuple[np.ndarray, np.ndarray]:
    g = p * values - costs
    ids = np.arange(len(values))
    order = np.lexsort((ids, -g))  # descending g, ties by ascending id
    return order, g


def _greedy(values: np.ndarray, costs: np.ndarray, P: SuccessFn) -> frozenset[int]:
    best: frozenset[int] = frozenset()
    g_max = 0.0
    for n in range(1, len(values) + 1):
        order, g = _ranked(values, costs, P(n))
        chosen = order[:n]
        total = math.fsum(g[chosen].tolist())
        if total < g_max:
            break
        g_max, best = total, frozenset(chosen.tolist())
    return best


def centralized_greedy(values, costs, P: SuccessFn) -> frozenset[int]:
    """Grow the transmitting set by top-``n`` prefixes of ``g_i(n) = P(n) v_i - wc_i``.

    Stops at the first ``n`` whose prefix sum drops below the best so far. Only
    optimal when every sensor has the same cost, which is enforced.
    """
    values = np.asarray(values, dtype=float)
    costs = np.broadcast_to(np.asarray(costs, dtype=float), values.shape)
    if len(costs) and np.any(costs != costs[0]):
        raise PreconditionError("centralized_greedy needs equal costs; use brute_force_optimum")
    return _greedy(values, costs, P)


def optimal_n_uniform(v: float, wc: float, P: SuccessFn, N: int) -> int:
    """``argmax_{0 <= n <= N} n (v P(n) - wc)``, ties to the smaller ``n``."""
    best_n, best = 0, 0.0
    for n in range(1, N + 1):
        val = n * (v * P(n) - wc)
        if val > best:
            best_n, best = n, val
    return best_n


def _maximize_unit(objective: Callable[[np.ndarray], np.ndarray], step: float = GRID_STEP) -> float:
    """Grid search on [0, 1] then golden-section refinement around the best cell.

    Ties resolve toward the smaller ``p``; refinement is accepted only on strict gain.
    """
    grid = np.linspace(0.0, 1.0, int(round(1.0 / step)) + 1)
    vals = objective(grid)
    k = int(np.argmax(vals))
    best_p, best_v = float(grid[k]), float(vals[k])
    lo, hi = max(0.0, best_p - step), min(1.0, best_p + step)
    f = lambda x: float(objective(np.array([x]))[0])
    a, b = lo, hi
    c, d = b - _GOLDEN * (b - a), a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(40):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    x = (a + b) / 2.0
    fx = f(x)
    if fx > best_v:
        best_p = x
    return best_p


def _binomial_objective(m: int, rewards: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    j = np.arange(m + 1)

    def objective(p: np.ndarray) -> np.ndarray:
        return binom.pmf(j[None, :], m, np.asarray(p)[:, None]) @ rewards

    return objective


def expected_uniform_reward(p: float, v: float, wc: float, P: SuccessFn, N: int) -> float:
    j = np.arange(N + 1)
    rewards = np.array([0.0] + [k * (v * P(k) - wc) for k in range(1, N + 1)])
    return float(binom.pmf(j, N, p) @ rewards)


@lru_cache(maxsize=4096)
def _optimal_p_cached(v: float, wc: float, P: SuccessFn, N: int) -> float:
    rewards = np.array([0.0] + [j * (v * P(j) - wc) for j in range(1, N + 1)])
    if np.all(rewards <= 0):
        return 0.0
    return _maximize_unit(_binomial_objective(N, rewards))


def optimal_p_uniform(v: float, wc: float, P: SuccessFn, N: int) -> float:
    """Common transmit probability maximizing the binomial expected step reward."""
    return _optimal_p_cached(float(v), float(wc), P, int(N))


def mixed_rewards(top: Sequence[tuple[float, float]], tie: tuple[float, float], m: int, P: SuccessFn) -> np.ndarray:
    """Expected step reward given ``j = 0..m`` of the tie group transmit alongside the fixed top group."""
    k = len(top)
    v_t, c_t = tie
    out = np.zeros(m + 1)
    for j in range(m + 1):
        n = k + j
        if n == 0:
            continue
        p = P(n)
        out[j] = math.fsum([p * v - c for v, c in top]) + j * (p * v_t - c_t)
    return out


@lru_cache(maxsize=8192)
def _tie_probability(top: tuple[tuple[float, float], ...], tie: tuple[float, float], m: int, P: SuccessFn) -> float:
    return _maximize_unit(_binomial_objective(m, mixed_rewards(top, tie, m, P)))


def stochastic_mixed(values, costs, P: SuccessFn) -> np.ndarray:
    """Per-sensor transmit probabilities for distributed execution.

    Sensors strictly above the boundary of the greedy optimum transmit surely;
    the group tied at the boundary transmits with the common probability that
    maximizes the expected step reward (the fixed group's reward included);
    everyone else stays silent.
    """
    values = np.asarray(values, dtype=float)
    costs = np.broadcast_to(np.asarray(costs, dtype=float), values.shape)
    probs = np.zeros(len(values))
    chosen = _greedy(values, costs, P)
    n = len(chosen)
    if n == 0:
        return probs
    order, g = _ranked(values, costs, P(n))
    boundary = order[n - 1]
    phi = g[boundary]
    top = g > phi
    tie = g == phi
    k, m = int(top.sum()), int(tie.sum())
    probs[top] = 1.0
    if m == n - k:
        probs[tie] = 1.0
        return probs
    top_pairs = tuple(sorted(zip(values[top].tolist(), costs[top].tolist())))
    probs[tie] = _tie_probability(top_pairs, (float(values[boundary]), float(costs[boundary])), m, P)
    return probs


def expected_reward(probs, values, costs, P: SuccessFn) -> float:
    """Exact expectation of the step reward under independent Bernoulli actions (small N only)."""
    probs = np.asarray(probs, dtype=float)
    n = len(probs)
    total = 0.0
    for mask in itertools.product((0, 1), repeat=n):
        weight = math.prod(p if a else 1.0 - p for p, a in zip(probs, mask))
        if weight == 0.0:
            continue
        total += weight * set_objective([i for i in range(n) if mask[i]], values, costs, P)
    return total


def heuristic_policy(x, z) -> int:
    return int(bool(x) != bool(z))


def random_p_policy(x, z, p: float, rng: np.random.Generator) -> int:
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    draw = rng.random()
    return int(bool(x) != bool(z) and draw < p)


def optimal_async_policy(i: int, own_value: float, stale_values, costs, P: SuccessFn) -> float:
    """Own transmit probability from ``stochastic_mixed`` with an outdated view of the others."""
    view = np.array(stale_values, dtype=float)
    view[i] = own_value
    return float(stochastic_mixed(view, costs, P)[i])


# --------------------------------------------------------------------------
# per-episode controllers driven by the harness

CENTRALIZED_GREEDY = "centralized_greedy"
STOCHASTIC = "stochastic_uniform"
HEURISTIC = "heuristic"
RANDOM_P = "random_p"
OPTIMAL_ASYNC = "optimal_async"
ANALYTIC_KINDS = (CENTRALIZED_GREEDY, STOCHASTIC, HEURISTIC, RANDOM_P, OPTIMAL_ASYNC)
NEEDS_CURVE = (CENTRALIZED_GREEDY, STOCHASTIC, OPTIMAL_ASYNC)


@dataclass
class Observation:
    t: int
    fire: np.ndarray  # true bits x_t
    belief: np.ndarray  # each sensor's estimate of its pre-update belief z_t
    values: np.ndarray  # true data values (full-information policies only)
    costs: np.ndarray  # w * c_i
    curve: SuccessFn | None
    feedback: float = 0.0  # channel utilization of the previous step
    last_outcome: np.ndarray | None = None  # success indicator of each sensor at t - 1


@dataclass
class StepOutcome:
    attempted: np.ndarray
    succeeded: np.ndarray
    rewards: np.ndarray  # per-agent local rewards
    error_loss: float  # after the gateway incorporated this step's reports


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    p: float = 0.3
    lag: int | None = None  # None: view refreshed at each own successful transmission
    params: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if self.lag is not None and self.lag < 1:
            raise ValueError("lag must be >= 1")

    @property
    def name(self) -> str:
        if self.kind == RANDOM_P:
            return f"random_{round(self.p * 100):d}"
        return self.kind


class HeuristicController:
    def act(self, obs: Observation, rng: np.random.Generator) -> np.ndarray:
        return obs.fire != obs.belief

    def observe(self, obs: Observation, outcome: "StepOutcome") -> None:
        pass


class RandomPController:
    def __init__(self, p: float):
        self.p = p

    def act(self, obs: Observation, rng: np.random.Generator) -> np.ndarray:
        draws = rng.random(len(obs.fire))
        return (obs.fire != obs.belief) & (draws < self.p)

    def observe(self, obs: Observation, outcome: "StepOutcome") -> None:
        pass


class GreedyController:
    def act(self, obs: Observation, rng: np.random.Generator) -> np.ndarray:
        mask = np.zeros(len(obs.fire), dtype=bool)
        mask[list(centralized_greedy(obs.values, obs.costs, obs.curve))] = True
        return mask

    def observe(self, obs: Observation, outcome: "StepOutcome") -> None:
        pass


class StochasticController:
    def act(self, obs: Observation, rng: np.random.Generator) -> np.ndarray:
        probs = stochastic_mixed(obs.values, obs.costs, obs.curve)
        return rng.random(len(probs)) < probs

    def observe(self, obs: Observation, outcome: "StepOutcome") -> None:
        pass


class AsyncController:
    """Each sensor plans with its own current value and an outdated view of the others.

    With ``lag=None`` a sensor's view is the value vector at its last successful
    transmission (downlink piggybacked on the acknowledgement); before the first
    success it sees all-zero values. With an integer lag every sensor sees the
    values from ``lag`` steps ago.
    """

    def __init__(self, n: int, lag: int | None):
        self.lag = lag
        self.history: list[np.ndarray] = []
        self.snapshot_step = np.full(n, -1)

    def _view(self, i: int) -> np.ndarray | None:
        if self.lag is not None:
            k = len(self.history) - 1 - self.lag
            return self.history[k] if k >= 0 else None
        s = self.snapshot_step[i]
        return self.history[s] if s >= 0 else None

    def act(self, obs: Observation, rng: np.random.Generator) -> np.ndarray:
        n = len(obs.values)
        self.history.append(np.array(obs.values, dtype=float))
        zeros = np.zeros(n)
        probs = np.zeros(n)
        memo: dict[tuple, float] = {}
        for i in range(n):
            view = self._view(i)
            if view is None:
                view = zeros
            # probabilities depend on the multiset of (value, cost) pairs, not on ids
            key = (id(view), float(view[i]), float(obs.values[i]), float(obs.costs[i]))
            if key not in memo:
                memo[key] = optimal_async_policy(i, obs.values[i], view, obs.costs, obs.curve)
            probs[i] = memo[key]
        return rng.random(n) < probs

    def observe(self, obs: Observation, outcome: "StepOutcome") -> None:
        self.snapshot_step[outcome.succeeded] = len(self.history) - 1


def make_controller(spec: PolicySpec, n: int):
    if spec.kind == HEURISTIC:
        return HeuristicController()
    if spec.kind == RANDOM_P:
        return RandomPController(spec.p)
    if spec.kind == CENTRALIZED_GREEDY:
        return GreedyController()
    if spec.kind == STOCHASTIC:
        return StochasticController()
    if spec.kind == OPTIMAL_ASYNC:
        return AsyncController(n, spec.lag)
    raise ValueError(f"not an analytic policy kind: {spec.kind!r}")
