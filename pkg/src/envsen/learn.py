"""Local-state MDP pieces and tabular multi-agent learners.

Every sensor is an agent with its own table over a 16-state discretization
(mismatch bit x 4 utilization buckets x last-outcome bit) and two actions.
Populations are stored as stacked arrays, one row per agent; no agent ever
reads or writes another agent's row.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .channel import BANDWIDTH_LIMITED, AnalyticChannel, LoraChannel
from .core import TransmissionRound, error_loss, step_reward

N_BUCKETS = 4
N_STATES = 2 * N_BUCKETS * 2
N_ACTIONS = 2

ENVSEN = "envsen"
TRACKING = "tracking"
SUM = "sum"


@dataclass(frozen=True)
class LocalState:
    own_bit: bool
    belief_bit: bool
    feedback: float | None = None
    last_outcome: bool | None = None

    def __post_init__(self) -> None:
        if self.feedback is not None and not 0.0 <= self.feedback <= 1.0:
            raise ValueError("feedback must lie in [0, 1]")

    @property
    def mismatch(self) -> bool:
        return bool(self.own_bit) != bool(self.belief_bit)

    def index(self) -> int:
        return int(encode_states(
            np.array([self.mismatch]),
            0.0 if self.feedback is None else self.feedback,
            np.array([bool(self.last_outcome)]),
        )[0])


def utilization_bucket(u: float) -> int:
    return min(N_BUCKETS - 1, int(math.floor(u * N_BUCKETS)))


def encode_states(mismatch: np.ndarray, feedback: float | None, last_outcome: np.ndarray | None) -> np.ndarray:
    """Vectorized state index ``mismatch * 8 + bucket * 2 + last_outcome``."""
    mismatch = np.asarray(mismatch, dtype=np.int64)
    bucket = 0 if feedback is None else utilization_bucket(feedback)
    last = np.zeros_like(mismatch) if last_outcome is None else np.asarray(last_outcome, dtype=np.int64)
    return mismatch * (2 * N_BUCKETS) + bucket * 2 + last


def state_key(s: int) -> str:
    m, rest = divmod(int(s), 2 * N_BUCKETS)
    u, o = divmod(rest, 2)
    return f"m{m}_u{u}_o{o}"


def local_reward(action: int, outcome: bool, value: float, cost: float, w: float) -> float:
    if action not in (0, 1):
        raise ValueError("action must be 0 or 1")
    if action == 0:
        return 0.0
    return (value if outcome else 0.0) - w * cost


def local_rewards(attempted: np.ndarray, succeeded: np.ndarray, values: np.ndarray, costs: np.ndarray, w: float) -> np.ndarray:
    return np.where(attempted, np.where(succeeded, values, 0.0) - w * costs, 0.0)


def global_reward(round: TransmissionRound, values, sites, w: float, mode: str = SUM, truth=None, belief=None) -> float:
    """Team reward: the sum of local rewards, or minus the post-update error loss."""
    if mode == SUM:
        return step_reward(round, values, sites, w)
    if mode == TRACKING:
        if truth is None or belief is None:
            raise ValueError("tracking reward needs the truth and the updated belief")
        return -error_loss(truth, belief)
    raise ValueError(f"unknown reward mode {mode!r}")


def feedback_signal(round: TransmissionRound | int, channel) -> float:
    attempted = round if isinstance(round, (int, np.integer)) else len(round.attempted)
    if isinstance(channel, AnalyticChannel):
        if channel.kind == BANDWIDTH_LIMITED:
            u = attempted / (channel.num_channels * channel.capacity)
        else:
            u = attempted * 2.0 / (channel.num_channels * channel.A)
    elif isinstance(channel, LoraChannel):
        u = attempted * channel.airtime / (channel.num_channels * channel.window)
    else:
        raise TypeError(f"unsupported channel {type(channel).__name__}")
    return float(min(1.0, max(0.0, u)))


def softmax_probs(q: np.ndarray, temperature: float) -> np.ndarray:
    """Action probabilities over the last axis, shift-invariant."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = (q - q.max(axis=-1, keepdims=True)) / temperature
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class IQLParams:
    alpha: float = 0.1
    gamma: float = 0.9
    temperature: float = 0.2
    temperature_decay: float = 0.99  # per training episode
    min_temperature: float = 0.01


class IQLAgents:
    """Independent Q-learners with a Boltzmann policy, one Q-table per agent."""

    kind = "iql"

    def __init__(self, n_agents: int, params: IQLParams | None = None, use_feedback: bool = True, seed: int | None = None):
        self.params = params or IQLParams()
        if not 0 < self.params.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        self.n_agents = n_agents
        self.use_feedback = use_feedback
        self.seed = seed
        self.q = np.zeros((n_agents, N_STATES, N_ACTIONS))
        self.temperature = self.params.temperature
        self.episodes_trained = 0

    def action_probs(self, states: np.ndarray) -> np.ndarray:
        rows = self.q[np.arange(self.n_agents), states]
        return softmax_probs(rows, self.temperature)

    def act(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        p1 = self.action_probs(states)[:, 1]
        return rng.random(self.n_agents) < p1

    def update(self, states, actions, rewards, next_states, done: bool = False) -> None:
        rewards = np.asarray(rewards, dtype=float)
        if not np.all(np.isfinite(rewards)):
            raise ValueError("non-finite reward")
        idx = np.arange(self.n_agents)
        a = np.asarray(actions, dtype=np.int64)
        boot = 0.0 if done else self.params.gamma * self.q[idx, next_states].max(axis=1)
        target = rewards + boot
        self.q[idx, states, a] += self.params.alpha * (target - self.q[idx, states, a])

    def end_episode(self) -> None:
        self.episodes_trained += 1
        self.temperature = max(self.params.min_temperature, self.temperature * self.params.temperature_decay)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "use_feedback": self.use_feedback,
            "n_agents": self.n_agents,
            "seed": self.seed,
            "episodes_trained": self.episodes_trained,
            "temperature": self.temperature,
            "hyperparameters": asdict(self.params),
            "tables": {state_key(s): self.q[:, s, :].tolist() for s in range(N_STATES)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IQLAgents":
        agents = cls(d["n_agents"], IQLParams(**d["hyperparameters"]), d["use_feedback"], d.get("seed"))
        for s in range(N_STATES):
            agents.q[:, s, :] = np.array(d["tables"][state_key(s)], dtype=float)
        agents.temperature = d["temperature"]
        agents.episodes_trained = d["episodes_trained"]
        return agents


def iql_step(agent: IQLAgents, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return agent.act(np.asarray(s), rng)


def iql_update(agent: IQLAgents, s, a, r, s_next, done: bool = False) -> IQLAgents:
    agent.update(np.asarray(s), a, r, np.asarray(s_next), done)
    return agent


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass
class PGParams:
    alpha: float = 0.1
    gamma: float = 0.0
    baseline_decay: float = 0.9
    max_logit: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


class PGAgents:
    """REINFORCE on a per-state Bernoulli transmit probability ``sigmoid(theta)``.

    A per-agent, per-state moving-average return serves as the baseline. Steps
    are Adam-normalized per table entry so rarely useful actions are driven out
    at a constant rate instead of stalling where the sigmoid flattens.
    """

    kind = "pg"

    def __init__(self, n_agents: int, params: PGParams | None = None, use_feedback: bool = True, seed: int | None = None):
        self.params = params or PGParams()
        if not 0 < self.params.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        self.n_agents = n_agents
        self.use_feedback = use_feedback
        self.seed = seed
        self.theta = np.zeros((n_agents, N_STATES))
        self.baseline = np.zeros((n_agents, N_STATES))
        self.seen = np.zeros((n_agents, N_STATES), dtype=bool)
        self.moment1 = np.zeros((n_agents, N_STATES))
        self.moment2 = np.zeros((n_agents, N_STATES))
        self.updates = np.zeros((n_agents, N_STATES), dtype=np.int64)
        self.episodes_trained = 0

    def transmit_probs(self, states: np.ndarray) -> np.ndarray:
        return sigmoid(self.theta[np.arange(self.n_agents), states])

    def act(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return rng.random(self.n_agents) < self.transmit_probs(states)

    def update(self, states, actions, rewards) -> None:
        """One REINFORCE step from a trajectory of shape ``(T, n_agents)``."""
        states = np.asarray(states, dtype=np.int64)
        actions = np.asarray(actions, dtype=float)
        rewards = np.asarray(rewards, dtype=float)
        if states.shape[0] == 0:
            raise ValueError("empty trajectory")
        if not np.all(np.isfinite(rewards)):
            raise ValueError("non-finite reward")
        returns = np.empty_like(rewards)
        acc = np.zeros(self.n_agents)
        for t in range(len(rewards) - 1, -1, -1):
            acc = rewards[t] + self.params.gamma * acc
            returns[t] = acc
        agent = np.broadcast_to(np.arange(self.n_agents), states.shape)
        # unseen states take their first return as baseline
        b = np.where(self.seen[agent, states], self.baseline[agent, states], returns)
        p = sigmoid(self.theta[agent, states])
        grad = (returns - b) * (actions - p)
        g = np.zeros_like(self.theta)
        np.add.at(g, (agent, states), grad)
        total = np.zeros_like(self.baseline)
        count = np.zeros_like(self.baseline)
        np.add.at(total, (agent, states), returns)
        np.add.at(count, (agent, states), 1.0)
        visited = count > 0
        self._adam_step(g, visited)
        # per-visit baseline: mean return of this episode's visits blended into the running average
        mean = np.divide(total, count, out=np.zeros_like(total), where=visited)
        d = self.params.baseline_decay
        blended = np.where(self.seen, d * self.baseline + (1.0 - d) * mean, mean)
        self.baseline = np.where(visited, blended, self.baseline)
        self.seen |= visited

    def _adam_step(self, g: np.ndarray, mask: np.ndarray) -> None:
        # lazy Adam: only entries visited this episode move or update their moments
        p = self.params
        self.updates += mask
        self.moment1 = np.where(mask, p.beta1 * self.moment1 + (1.0 - p.beta1) * g, self.moment1)
        self.moment2 = np.where(mask, p.beta2 * self.moment2 + (1.0 - p.beta2) * g * g, self.moment2)
        k = np.maximum(self.updates, 1)
        m_hat = self.moment1 / (1.0 - p.beta1**k)
        v_hat = self.moment2 / (1.0 - p.beta2**k)
        step = np.where(mask, p.alpha * m_hat / (np.sqrt(v_hat) + p.adam_eps), 0.0)
        self.theta = np.clip(self.theta + step, -p.max_logit, p.max_logit)

    def end_episode(self) -> None:
        self.episodes_trained += 1

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "use_feedback": self.use_feedback,
            "n_agents": self.n_agents,
            "seed": self.seed,
            "episodes_trained": self.episodes_trained,
            "hyperparameters": asdict(self.params),
            "tables": {
                state_key(s): {
                    "logit": self.theta[:, s].tolist(),
                    "baseline": self.baseline[:, s].tolist(),
                    "seen": self.seen[:, s].tolist(),
                    "moment1": self.moment1[:, s].tolist(),
                    "moment2": self.moment2[:, s].tolist(),
                    "updates": self.updates[:, s].tolist(),
                }
                for s in range(N_STATES)
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PGAgents":
        agents = cls(d["n_agents"], PGParams(**d["hyperparameters"]), d["use_feedback"], d.get("seed"))
        for s in range(N_STATES):
            entry = d["tables"][state_key(s)]
            agents.theta[:, s] = entry["logit"]
            agents.baseline[:, s] = entry["baseline"]
            agents.seen[:, s] = entry["seen"]
            agents.moment1[:, s] = entry["moment1"]
            agents.moment2[:, s] = entry["moment2"]
            agents.updates[:, s] = entry["updates"]
        agents.episodes_trained = d["episodes_trained"]
        return agents


def pg_step(agent: PGAgents, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return agent.act(np.asarray(s), rng)


def pg_update(agent: PGAgents, states, actions, rewards) -> PGAgents:
    agent.update(states, actions, rewards)
    return agent


class LearnerController:
    """Adapts an agent population to the harness step loop.

    IQL updates one step late, once the next local state is known; PG updates
    once per episode. Frozen controllers only act.
    """

    def __init__(self, agents: IQLAgents | PGAgents, learning: bool = False, reward_mode: str = ENVSEN):
        if reward_mode not in (ENVSEN, TRACKING):
            raise ValueError(f"unknown reward mode {reward_mode!r}")
        self.agents = agents
        self.learning = learning
        self.reward_mode = reward_mode
        self._pending = None
        self._trajectory: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self._states = None
        self._actions = None

    def act(self, obs, rng: np.random.Generator) -> np.ndarray:
        feedback = obs.feedback if self.agents.use_feedback else None
        states = encode_states(obs.fire != obs.belief, feedback, obs.last_outcome)
        if self.learning and self._pending is not None and isinstance(self.agents, IQLAgents):
            s, a, r = self._pending
            self.agents.update(s, a, r, states)
            self._pending = None
        actions = self.agents.act(states, rng)
        self._states, self._actions = states, actions
        return actions

    def observe(self, obs, outcome) -> None:
        if not self.learning:
            return
        if self.reward_mode == ENVSEN:
            r = np.asarray(outcome.rewards, dtype=float)
        else:
            r = np.full(self.agents.n_agents, -float(outcome.error_loss))
        if isinstance(self.agents, IQLAgents):
            self._pending = (self._states, self._actions, r)
        else:
            self._trajectory.append((self._states, self._actions, r))

    def finish(self) -> None:
        if not self.learning:
            return
        if isinstance(self.agents, IQLAgents):
            if self._pending is not None:
                s, a, r = self._pending
                self.agents.update(s, a, r, s, done=True)
        elif self._trajectory:
            s, a, r = (np.array(x) for x in zip(*self._trajectory))
            self.agents.update(s, a, r)
        self.agents.end_episode()
        self._pending = None
        self._trajectory = []


def save_checkpoint(agents: IQLAgents | PGAgents, path, metadata: dict | None = None) -> None:
    doc = agents.to_dict()
    if metadata:
        doc["metadata"] = metadata
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> IQLAgents | PGAgents:
    with open(path) as fh:
        doc = json.load(fh)
    if doc["kind"] == IQLAgents.kind:
        return IQLAgents.from_dict(doc)
    if doc["kind"] == PGAgents.kind:
        return PGAgents.from_dict(doc)
    raise ValueError(f"unknown checkpoint kind {doc['kind']!r}")
