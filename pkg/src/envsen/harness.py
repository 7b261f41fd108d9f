"""Episode runner, training loop, evaluation and weight sweeps."""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from . import belief as belief_mod
from .channel import (
    LORA,
    AnalyticChannel,
    LoraChannel,
    resolve_mask_analytic,
    resolve_mask_lora,
)
from .config import ConfigError, ExperimentConfig
from .core import make_sites, site_costs, site_weights
from .fire import FireScenario, ScenarioRanges, generate_scenarios, rollout
from .learn import (
    IQLAgents,
    IQLParams,
    LearnerController,
    PGAgents,
    PGParams,
    feedback_signal,
    local_rewards,
)
from .policy import NEEDS_CURVE, Observation, PolicySpec, StepOutcome, make_controller

EPISODE_HEADER = ["step", "attempted", "succeeded", "data_value", "energy_cost", "error_loss", "reward"]
AGGREGATE_HEADER = ["policy", "w", "mean_reward", "std_reward", "mean_value", "mean_cost", "mean_error_loss"]
CURVE_HEADER = ["episode", "reward", "data_value", "energy_cost", "error_loss"]

EVAL_STREAM = 1
TRAIN_STREAM = 2


def episode_rng(master_seed: int, stream: int, index: int) -> np.random.Generator:
    """Counter-based stream: independent of execution order and worker count."""
    return np.random.default_rng(np.random.SeedSequence([master_seed, stream, index]))


def worker_count() -> int:
    raw = os.environ.get("ENVSEN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"ENVSEN_THREADS must be an integer, got {raw!r}") from None


class Environment:
    """Materialized experiment: layout, scenarios, channel and belief model."""

    def __init__(self, config: ExperimentConfig):
        self.config = config.validate()
        cfg = self.config
        rng = np.random.default_rng(cfg.layout_seed)
        self.positions = rng.uniform(0.0, cfg.area, size=(cfg.num_sensors, 2))
        self.sites = make_sites(self.positions, cfg.energy_cost)
        self.costs = site_costs(self.sites)
        self.weights = site_weights(self.sites)
        self.gateway = (cfg.area / 2.0, cfg.area / 2.0)
        self.distances = np.linalg.norm(self.positions - np.array(self.gateway), axis=1)
        ch = cfg.channel
        if ch.kind == LORA:
            self.channel = LoraChannel(
                gateway_position=self.gateway,
                num_channels=ch.num_channels,
                path_loss_exponent=ch.path_loss_exponent,
                reference_loss_db=ch.reference_loss_db,
                tx_power_dbm=ch.tx_power_dbm,
                sensitivity_dbm=ch.sensitivity_dbm,
                capture_margin_db=ch.capture_margin_db,
                noise_std_db=ch.noise_std_db,
                airtime=ch.airtime,
                window=ch.window,
            )
            self.curve = None
        else:
            self.channel = AnalyticChannel(ch.kind, ch.capacity, ch.epsilon, ch.A, ch.num_channels)
            self.curve = self.channel.curve()
        self._trajectories: dict[int, np.ndarray] = {}

    @cached_property
    def scenarios(self) -> list[FireScenario]:
        cfg = self.config
        if cfg.fire.scenario_file:
            docs = json.loads(Path(cfg.fire.scenario_file).read_text())
            scenarios = [FireScenario.from_dict(d) for d in docs]
            if len(scenarios) < cfg.scenario_count:
                raise ConfigError(f"{cfg.fire.scenario_file} holds {len(scenarios)} scenarios, need {cfg.scenario_count}")
            for s in scenarios:
                if s.n != cfg.num_sensors or s.horizon < cfg.horizon:
                    raise ConfigError("replayed scenario does not match num_sensors/horizon")
            return scenarios[: cfg.scenario_count]
        ranges = ScenarioRanges(
            wind_speed=tuple(cfg.fire.wind_speed),
            direction_drift_deg=cfg.fire.direction_drift_deg,
            speed_drift=cfg.fire.speed_drift,
            spread_rate=(cfg.fire.spread_rate, cfg.fire.spread_rate),
            wind_gain=(cfg.fire.wind_gain, cfg.fire.wind_gain),
        )
        return generate_scenarios(cfg.scenario_count, cfg.fire.base_seed, self.positions, cfg.horizon, ranges, cfg.fire.neighbor_radius)

    @cached_property
    def belief_model(self) -> belief_mod.BeliefModel:
        b = self.config.belief
        if b.kind == belief_mod.NEIGHBOR_PROPAGATION:
            return belief_mod.BeliefModel(b.kind, b.threshold, self.scenarios[0].neighbors())
        return belief_mod.BeliefModel(b.kind, b.threshold)

    @property
    def n(self) -> int:
        return self.config.num_sensors

    @property
    def train_indices(self) -> list[int]:
        return list(range(self.config.scenario_count - self.config.eval_episodes))

    @property
    def eval_indices(self) -> list[int]:
        cfg = self.config
        return list(range(cfg.scenario_count - cfg.eval_episodes, cfg.scenario_count))

    def trajectory(self, index: int) -> np.ndarray:
        traj = self._trajectories.get(index)
        if traj is None:
            traj = rollout(self.scenarios[index])
            traj.flags.writeable = False
            self._trajectories[index] = traj
        return traj

    def resolve(self, attempted: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if isinstance(self.channel, LoraChannel):
            return resolve_mask_lora(attempted, self.distances, self.channel, rng)
        return resolve_mask_analytic(attempted, self.channel, rng)


@dataclass
class EpisodeRecord:
    attempted: np.ndarray
    succeeded: np.ndarray
    data_value: np.ndarray
    energy_cost: np.ndarray
    error_loss: np.ndarray
    model_loss: np.ndarray
    reward: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.reward)

    @property
    def total_reward(self) -> float:
        return math.fsum(self.reward.tolist())

    @property
    def total_value(self) -> float:
        return math.fsum(self.data_value.tolist())

    @property
    def total_cost(self) -> float:
        return math.fsum(self.energy_cost.tolist())

    @property
    def mean_error_loss(self) -> float:
        return math.fsum(self.error_loss.tolist()) / self.steps

    def rows(self):
        for t in range(self.steps):
            yield [
                t + 1,
                int(self.attempted[t]),
                int(self.succeeded[t]),
                float(self.data_value[t]),
                float(self.energy_cost[t]),
                float(self.error_loss[t]),
                float(self.reward[t]),
            ]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(EPISODE_HEADER)
            writer.writerows(self.rows())


def run_episode(env: Environment, scenario_index: int, controller, rng: np.random.Generator, w: float | None = None) -> EpisodeRecord:
    """Simulate one episode.

    Each step: fire advances; the gateway extrapolates its belief and data
    values follow; sensors act on their local view; the channel resolves the
    round; successful reports overwrite the belief; rewards are booked and the
    controller observes the outcome.
    """
    cfg = env.config
    w = cfg.w if w is None else w
    traj = env.trajectory(scenario_index)
    if traj.shape[0] - 1 < cfg.horizon:
        raise ConfigError("scenario horizon shorter than configured horizon")
    if controller_needs_curve(controller) and env.curve is None:
        raise ConfigError("full-information policy needs an analytic channel")
    n, T = env.n, cfg.horizon
    model = env.belief_model
    persistent = model.kind == belief_mod.PERSISTENCE
    wc = w * env.costs
    weights = env.weights
    uniform_weights = bool(np.all(weights == 1.0))

    belief = np.zeros(n, dtype=bool)
    memory = np.zeros(n, dtype=bool)  # each sensor's last successfully reported bit
    feedback = 0.0
    last = np.zeros(n, dtype=bool)
    cols = {k: np.zeros(T) for k in ("attempted", "succeeded", "data_value", "energy_cost", "error_loss", "model_loss", "reward")}

    for t in range(1, T + 1):
        x = traj[t]
        z = belief_mod.predict(model, belief)
        mismatch = x != z
        values = np.where(mismatch, weights, 0.0)
        obs = Observation(t, x, memory if persistent else z, values, wc, env.curve, feedback, last)
        attempted = np.asarray(controller.act(obs, rng), dtype=bool)
        succeeded = env.resolve(attempted, rng)
        belief = z.copy()
        belief[succeeded] = x[succeeded]
        memory[succeeded] = x[succeeded]
        rewards = local_rewards(attempted, succeeded, values, env.costs, w)
        post = x != belief
        loss = float(np.count_nonzero(post)) if uniform_weights else math.fsum(weights[post].tolist())
        m_loss = float(np.count_nonzero(mismatch)) if uniform_weights else math.fsum(weights[mismatch].tolist())
        value = math.fsum(values[succeeded].tolist())
        cost = math.fsum(env.costs[attempted].tolist())
        k = t - 1
        cols["attempted"][k] = np.count_nonzero(attempted)
        cols["succeeded"][k] = np.count_nonzero(succeeded)
        cols["data_value"][k] = value
        cols["energy_cost"][k] = cost
        cols["error_loss"][k] = loss
        cols["model_loss"][k] = m_loss
        cols["reward"][k] = math.fsum(rewards[attempted].tolist())
        controller.observe(obs, StepOutcome(attempted, succeeded, rewards, loss))
        feedback = feedback_signal(int(np.count_nonzero(attempted)), env.channel)
        last = succeeded
    if hasattr(controller, "finish"):
        controller.finish()
    return EpisodeRecord(**cols)


def controller_needs_curve(controller) -> bool:
    from .policy import AsyncController, GreedyController, StochasticController

    return isinstance(controller, (AsyncController, GreedyController, StochasticController))


# --------------------------------------------------------------------------
# policies from config


def make_agents(config: ExperimentConfig, seed: int | None = None) -> IQLAgents | PGAgents:
    pol = config.policy
    if pol.kind == "iql":
        return IQLAgents(config.num_sensors, IQLParams(**pol.hyperparameters), pol.use_feedback, seed)
    if pol.kind == "pg":
        return PGAgents(config.num_sensors, PGParams(**pol.hyperparameters), pol.use_feedback, seed)
    raise ConfigError(f"{pol.kind!r} is not a learned policy")


def controller_factory(config: ExperimentConfig, agents=None):
    """Return a zero-argument callable making a fresh frozen controller per episode."""
    pol = config.policy
    if pol.learned:
        if agents is None:
            raise ConfigError(f"learned policy {pol.kind!r} needs trained agents or a checkpoint")
        if agents.n_agents != config.num_sensors:
            raise ConfigError("checkpoint agent count does not match num_sensors")
        return lambda: LearnerController(agents, learning=False)
    if pol.kind in NEEDS_CURVE and config.channel.kind == LORA:
        raise ConfigError(f"policy {pol.kind!r} needs an analytic channel")
    spec = PolicySpec(pol.kind, pol.p, pol.lag)
    return lambda: make_controller(spec, config.num_sensors)


@dataclass
class TrainingResult:
    agents: IQLAgents | PGAgents
    curve: list[EpisodeRecord]
    eval_curve: list[tuple[int, float]] = field(default_factory=list)  # (episodes trained, held-out mean reward)

    def curve_rows(self):
        for e, rec in enumerate(self.curve):
            yield [e, rec.total_reward, rec.total_value, rec.total_cost, rec.mean_error_loss]

    def write_curve(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CURVE_HEADER)
            writer.writerows(self.curve_rows())


def train(
    config: ExperimentConfig,
    episodes: int | None = None,
    env: Environment | None = None,
    seed: int | None = None,
    eval_every: int | None = None,
) -> TrainingResult:
    """Sequentially train a learned policy on the training scenarios.

    With ``eval_every`` the frozen policy is scored on the held-out scenarios
    before training and after every ``eval_every`` episodes.
    """
    env = env or Environment(config)
    episodes = config.training_episodes if episodes is None else episodes
    seed = config.master_seed if seed is None else seed
    train_idx = env.train_indices
    if not train_idx:
        raise ConfigError("no training scenarios: scenario_count must exceed eval_episodes")
    agents = make_agents(config, seed)
    controller = LearnerController(agents, learning=True, reward_mode=config.policy.reward)
    curve = []
    eval_curve = []
    frozen = lambda: LearnerController(agents, learning=False)  # noqa: E731
    for e in range(episodes):
        if eval_every and e % eval_every == 0:
            eval_curve.append((e, aggregate("", config.w, evaluate_records(config, frozen, env)).mean_reward))
        rng = episode_rng(seed, TRAIN_STREAM, e)
        curve.append(run_episode(env, train_idx[e % len(train_idx)], controller, rng, w=config.w))
    if eval_every:
        eval_curve.append((episodes, aggregate("", config.w, evaluate_records(config, frozen, env)).mean_reward))
    return TrainingResult(agents, curve, eval_curve)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class Aggregate:
    policy: str
    w: float
    mean_reward: float
    std_reward: float
    mean_value: float
    mean_cost: float
    mean_error_loss: float
    records: list[EpisodeRecord]

    def row(self) -> list:
        return [self.policy, self.w, self.mean_reward, self.std_reward, self.mean_value, self.mean_cost, self.mean_error_loss]


def aggregate(name: str, w: float, records: Sequence[EpisodeRecord]) -> Aggregate:
    if not records:
        raise ConfigError("no episodes to aggregate")
    rewards = [r.total_reward for r in records]
    mean = math.fsum(rewards) / len(rewards)
    std = math.sqrt(math.fsum((r - mean) ** 2 for r in rewards) / len(rewards))  # population std
    return Aggregate(
        policy=name,
        w=w,
        mean_reward=mean,
        std_reward=std,
        mean_value=math.fsum(r.total_value for r in records) / len(records),
        mean_cost=math.fsum(r.total_cost for r in records) / len(records),
        mean_error_loss=math.fsum(r.mean_error_loss for r in records) / len(records),
        records=list(records),
    )


def evaluate_records(config: ExperimentConfig, factory, env: Environment | None = None, episodes: int | None = None) -> list[EpisodeRecord]:
    env = env or Environment(config)
    idx = env.eval_indices
    if episodes is not None:
        idx = idx[:episodes]
    if not idx:
        raise ConfigError("no evaluation scenarios")
    env.belief_model  # materialize shared state before fanning out
    for i in idx:
        env.trajectory(i)

    def one(k: int) -> EpisodeRecord:
        return run_episode(env, idx[k], factory(), episode_rng(config.master_seed, EVAL_STREAM, k), w=config.w)

    workers = worker_count()
    if workers == 1:
        return [one(k) for k in range(len(idx))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(len(idx))))


def run_evaluation(config: ExperimentConfig, agents=None, env: Environment | None = None, episodes: int | None = None) -> Aggregate:
    """Frozen-policy evaluation on the held-out scenarios (mean/std over episodes)."""
    records = evaluate_records(config, controller_factory(config, agents), env, episodes)
    return aggregate(config.policy.name, config.w, records)


def sweep_w(config: ExperimentConfig, ws: Sequence[float], policies: Sequence, env: Environment | None = None) -> list[Aggregate]:
    """One evaluation row per (policy, w); learned policies are retrained at every w.

    ``policies`` holds PolicyConfig objects or dicts of PolicyConfig fields.
    """
    env = env or Environment(config)
    rows = []
    for pol in policies:
        pol_cfg = replace(config.policy, **pol) if isinstance(pol, dict) else pol
        for w in ws:
            if w < 0:
                raise ConfigError("w must be >= 0")
            cfg = replace(config, w=float(w), policy=pol_cfg)
            agents = train(cfg, env=env).agents if pol_cfg.learned else None
            rows.append(run_evaluation(cfg, agents, env))
    return rows


def write_aggregate(rows: Sequence[Aggregate], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AGGREGATE_HEADER)
        for row in rows:
            writer.writerow(row.row())
