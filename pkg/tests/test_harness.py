import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from envsen.config import (
    BeliefConfig,
    ChannelConfig,
    ConfigError,
    ExperimentConfig,
    FireConfig,
    apply_override,
    from_dict,
    load_config,
    parse_policy_name,
)
from envsen.harness import (
    AGGREGATE_HEADER,
    EPISODE_HEADER,
    Environment,
    aggregate,
    controller_factory,
    episode_rng,
    evaluate_records,
    run_episode,
    run_evaluation,
    sweep_w,
    train,
    worker_count,
    write_aggregate,
)
from envsen.learn import IQLAgents
from envsen.policy import PolicySpec, make_controller


def small(**kw):
    base = ExperimentConfig(num_sensors=30, area=600.0, scenario_count=40, eval_episodes=10, horizon=20, training_episodes=20)
    return replace(base, **kw)


class Recorder:
    """Wraps a controller and keeps what it saw and did at every step."""

    def __init__(self, inner):
        self.inner = inner
        self.steps = []

    def act(self, obs, rng):
        a = self.inner.act(obs, rng)
        self.steps.append((obs.values.copy(), np.asarray(a, bool).copy()))
        return a

    def observe(self, obs, outcome):
        self.inner.observe(obs, outcome)


@pytest.fixture(scope="module")
def env():
    return Environment(small())


class TestConfig:
    def test_defaults_valid(self):
        cfg = ExperimentConfig().validate()
        assert cfg.num_sensors == 200 and cfg.eval_episodes == 30 and cfg.w == 0.2
        assert cfg.channel.num_channels == 4 and cfg.channel.capacity == 2 and cfg.channel.epsilon == 0.001

    def test_round_trip(self):
        cfg = small(policy=replace(ExperimentConfig().policy, kind="pg", use_feedback=True))
        assert from_dict(json.loads(cfg.to_json())) == cfg

    def test_missing_file_names_path(self, tmp_path):
        path = tmp_path / "absent.json"
        with pytest.raises(ConfigError, match="absent.json"):
            load_config(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_overrides(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"num_sensors": 10, "channel": {"kind": "aloha"}}))
        cfg = load_config(path, ["channel.A=12", "policy.kind=random_p", "fire.wind_speed=[1, 2]"])
        assert cfg.num_sensors == 10 and cfg.channel.kind == "aloha" and cfg.channel.A == 12
        assert cfg.fire.wind_speed == (1, 2) and cfg.policy.kind == "random_p"
        with pytest.raises(ConfigError):
            apply_override({}, "no_equals_sign")

    @pytest.mark.parametrize(
        "data",
        [
            {"bogus": 1},
            {"channel": {"kind": "fdma"}},
            {"policy": {"kind": "qmix"}},
            {"channel": {"kind": "lora"}, "policy": {"kind": "stochastic_uniform"}},
            {"eval_episodes": 500},
            {"w": -1},
            {"master_seed": 1.5},
            {"policy": {"reward": "other"}},
            {"belief": {"kind": "magic"}},
        ],
    )
    def test_rejects(self, data):
        with pytest.raises(ConfigError):
            from_dict(data)

    def test_policy_names(self):
        assert parse_policy_name("random_30") == {"kind": "random_p", "p": 0.3}
        assert parse_policy_name("envsen_iql_fb") == {"kind": "iql", "reward": "envsen", "use_feedback": True}
        assert parse_policy_name("pg") == {"kind": "pg", "reward": "tracking", "use_feedback": False}
        for bad in ("random_x", "random_300", "qmix", "envsen_heuristic"):
            with pytest.raises(ConfigError):
                parse_policy_name(bad)
        for name in ("heuristic", "random_5", "envsen_pg_fb", "iql"):
            assert ExperimentConfig().with_policy(**parse_policy_name(name)).policy.name == name


class TestEnvironment:
    def test_split_is_disjoint(self, env):
        assert env.train_indices == list(range(30)) and env.eval_indices == list(range(30, 40))

    def test_layout_reproducible(self):
        a, b = Environment(small()), Environment(small())
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.trajectory(3), b.trajectory(3))

    def test_rng_streams_are_counter_based(self):
        a = episode_rng(5, 1, 3).random(4)
        assert np.array_equal(a, episode_rng(5, 1, 3).random(4))
        assert not np.array_equal(a, episode_rng(5, 1, 4).random(4))
        assert not np.array_equal(a, episode_rng(5, 2, 3).random(4))

    def test_worker_count(self, monkeypatch):
        monkeypatch.setenv("ENVSEN_THREADS", "3")
        assert worker_count() == 3
        monkeypatch.setenv("ENVSEN_THREADS", "many")
        with pytest.raises(ConfigError):
            worker_count()

    def test_scenario_replay(self, tmp_path, env):
        path = tmp_path / "scenarios.json"
        path.write_text(json.dumps([s.to_dict() for s in env.scenarios]))
        replayed = Environment(small(fire=FireConfig(scenario_file=str(path))))
        assert np.array_equal(replayed.trajectory(5), env.trajectory(5))
        short = tmp_path / "short.json"
        short.write_text(json.dumps([s.to_dict() for s in env.scenarios[:3]]))
        with pytest.raises(ConfigError):
            Environment(small(fire=FireConfig(scenario_file=str(short)))).scenarios


class TestEpisode:
    def run(self, env, kind, index=30, seed=0, **kw):
        rec = Recorder(make_controller(PolicySpec(kind, **kw), env.n))
        return run_episode(env, index, rec, episode_rng(seed, 1, index)), rec

    def test_never_sending_costs_nothing(self, env):
        record, _ = self.run(env, "random_p", p=0.0)
        assert record.total_cost == 0 and record.total_value == 0
        assert np.array_equal(record.error_loss, record.model_loss)

    @pytest.mark.parametrize("kind", ["heuristic", "random_p", "stochastic_uniform", "centralized_greedy", "optimal_async"])
    def test_value_equals_loss_reduction(self, env, kind):
        for index in env.eval_indices:
            record, _ = self.run(env, kind, index=index)
            assert np.array_equal(record.data_value, record.model_loss - record.error_loss)

    def test_heuristic_sends_exactly_the_mismatches(self, env):
        for index in env.eval_indices:
            _, rec = self.run(env, "heuristic", index=index)
            for values, attempted in rec.steps:
                assert np.array_equal(attempted, values > 0)

    def test_neighbor_belief_identity(self):
        env = Environment(small(belief=BeliefConfig(kind="neighbor-propagation", threshold=0.5)))
        record, _ = self.run(env, "heuristic")
        assert np.array_equal(record.data_value, record.model_loss - record.error_loss)

    def test_lora_episode(self):
        env = Environment(small(channel=ChannelConfig(kind="lora")))
        record, _ = self.run(env, "heuristic")
        assert record.steps == 20 and np.all(record.succeeded <= record.attempted)
        with pytest.raises(ConfigError):
            run_episode(env, 30, make_controller(PolicySpec("stochastic_uniform"), env.n), episode_rng(0, 1, 0))

    def test_csv_layout(self, env, tmp_path):
        record, _ = self.run(env, "heuristic")
        path = tmp_path / "ep.csv"
        record.write_csv(path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == EPISODE_HEADER and len(rows) == 21
        assert [int(r[0]) for r in rows[1:]] == list(range(1, 21))


class TestComparisons:
    def mean(self, env, kind, **kw):
        cfg = env.config.with_policy(kind=kind, **kw)
        return run_evaluation(cfg, env=env)

    def test_optimal_beats_sending_everything(self, env):
        assert self.mean(env, "stochastic_uniform").mean_reward >= self.mean(env, "random_p", p=1.0).mean_reward

    def test_heuristic_collects_most_without_contention(self):
        cfg = small(channel=ChannelConfig(capacity=30, epsilon=0.0, num_channels=1))
        env = Environment(cfg)
        heur = self.mean(env, "heuristic").records
        for p in (0.1, 0.5, 1.0):
            rand = self.mean(env, "random_p", p=p).records
            assert all(h.total_value >= r.total_value for h, r in zip(heur, rand))

    def test_stale_views_do_not_beat_fresh_ones(self):
        cfg = replace(small(), eval_episodes=30, scenario_count=40, fire=FireConfig(spread_rate=0.5))
        env = Environment(cfg)
        asyn = self.mean(env, "optimal_async").mean_reward
        assert asyn <= self.mean(env, "stochastic_uniform").mean_reward


class TestEvaluation:
    def test_thread_count_does_not_change_results(self, env, monkeypatch):
        cfg = env.config.with_policy(kind="stochastic_uniform")
        monkeypatch.setenv("ENVSEN_THREADS", "1")
        one = [r.rows() for r in evaluate_records(cfg, controller_factory(cfg), env)]
        monkeypatch.setenv("ENVSEN_THREADS", "4")
        four = [r.rows() for r in evaluate_records(cfg, controller_factory(cfg), env)]
        assert [list(x) for x in one] == [list(x) for x in four]

    def test_aggregate(self, env, tmp_path):
        agg = run_evaluation(env.config.with_policy(kind="heuristic"), env=env)
        rewards = [r.total_reward for r in agg.records]
        assert agg.mean_reward == pytest.approx(np.mean(rewards))
        assert agg.std_reward == pytest.approx(np.std(rewards))
        single = aggregate("x", 0.2, agg.records[:1])
        assert single.std_reward == 0.0
        path = tmp_path / "agg.csv"
        write_aggregate([agg], path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == AGGREGATE_HEADER and rows[1][0] == "heuristic"

    def test_learned_policy_needs_agents(self, env):
        with pytest.raises(ConfigError):
            controller_factory(env.config.with_policy(kind="iql"))
        with pytest.raises(ConfigError):
            controller_factory(env.config.with_policy(kind="iql"), IQLAgents(3))

    def test_training_deterministic(self, env):
        cfg = env.config.with_policy(kind="pg", reward="envsen")
        a = train(cfg, episodes=5, env=env, seed=3)
        b = train(cfg, episodes=5, env=env, seed=3)
        assert a.agents.to_dict() == b.agents.to_dict()
        assert [r.total_reward for r in a.curve] == [r.total_reward for r in b.curve]

    def test_training_with_evaluation_checkpoints(self, env):
        cfg = env.config.with_policy(kind="iql", reward="envsen")
        result = train(cfg, episodes=6, env=env, seed=1, eval_every=3)
        assert [e for e, _ in result.eval_curve] == [0, 3, 6]

    def test_sweep_rows(self, env):
        ws = [0.05, 0.4]
        rows = sweep_w(env.config, ws, [{"kind": "heuristic"}, {"kind": "stochastic_uniform"}])
        assert [(r.policy, r.w) for r in rows] == [("heuristic", 0.05), ("heuristic", 0.4), ("stochastic_uniform", 0.05), ("stochastic_uniform", 0.4)]
        heur = rows[:2]
        assert heur[0].mean_cost == heur[1].mean_cost and heur[0].mean_value == heur[1].mean_value
        assert rows[3].mean_cost <= rows[2].mean_cost
        with pytest.raises(ConfigError):
            sweep_w(env.config, [-0.1], [{"kind": "heuristic"}])
