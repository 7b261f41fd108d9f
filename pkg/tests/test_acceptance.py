"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL`` line; the lines are also
collected into the terminal summary of the pytest run.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import gammaln

from envsen.channel import ALOHA, BANDWIDTH_LIMITED, AnalyticChannel, p_success_aloha, p_success_bw
from envsen.cli import cli_main
from envsen.config import ChannelConfig, ExperimentConfig, FireConfig
from envsen.harness import Environment, episode_rng, run_episode, run_evaluation, sweep_w, train
from envsen.policy import (
    PolicySpec,
    brute_force_optimum,
    centralized_greedy,
    make_controller,
    optimal_n_uniform,
    optimal_p_uniform,
    set_objective,
)

from .conftest import ACCEPTANCE_LINES

SEEDS = range(5)


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def bw_curve(capacity, epsilon=0.001, channels=1):
    return AnalyticChannel(BANDWIDTH_LIMITED, capacity=capacity, epsilon=epsilon, num_channels=channels).curve()


def aloha_curve(A):
    return AnalyticChannel(ALOHA, A=A, num_channels=1).curve()


def learning_config() -> ExperimentConfig:
    return ExperimentConfig(
        num_sensors=50,
        scenario_count=200,
        eval_episodes=30,
        horizon=60,
        w=0.2,
        training_episodes=1000,
        fire=FireConfig(spread_rate=0.1),
        channel=ChannelConfig(num_channels=4, capacity=2, epsilon=0.001),
    )


class Recorder:
    def __init__(self, inner):
        self.inner = inner
        self.attempted = []
        self.succeeded = []

    def act(self, obs, rng):
        a = np.asarray(self.inner.act(obs, rng), bool)
        self.attempted.append(a.copy())
        return a

    def observe(self, obs, outcome):
        self.succeeded.append(outcome.succeeded.copy())
        self.inner.observe(obs, outcome)


def replay_persistence(traj, succeeded):
    """Independent gateway replay under the persistence belief: yields (x, z, z_after)."""
    z = np.zeros(traj.shape[1], dtype=bool)
    for t, ok in enumerate(succeeded, start=1):
        x = traj[t]
        after = z.copy()
        after[ok] = x[ok]
        yield x, z, after
        z = after


def test_criterion_1_greedy_matches_exhaustive_search():
    rng = np.random.default_rng(20240101)
    curve = bw_curve(2)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        values = rng.integers(0, 2, size=n).astype(float)
        costs = np.full(n, float(rng.uniform(0.0, 1.2)))
        greedy = set_objective(centralized_greedy(values, costs, curve), values, costs, curve)
        _, best = brute_force_optimum(values, costs, curve)
        mismatches += greedy != best
    elapsed = time.perf_counter() - start
    report(1, mismatches == 0 and elapsed < 10.0, f"{1000 - mismatches}/1000 exact matches in {elapsed:.2f} s")


def test_criterion_2_optimal_transmitter_count():
    eps = 0.001
    ratios = np.linspace(0.0, 1.0, 10)
    bw_bad, aloha_bad = [], []
    for r in ratios:
        for C in (1, 2, 3, 4, 5, 6, 7, 8, 9, 10):
            expected = 0 if r >= 1 - eps else C
            got = optimal_n_uniform(1.0, float(r), bw_curve(C, eps), 4 * C)
            if got != expected:
                bw_bad.append((round(r, 3), C, got, expected))
        for A in (4, 6, 8, 10, 12, 14, 16, 20, 30, 40):
            expected = 0 if r >= math.exp(-1) else A // 2
            got = optimal_n_uniform(1.0, float(r), aloha_curve(A), 4 * A)
            if got != expected:
                aloha_bad.append((round(float(r), 3), A, got, expected))
    ok = not bw_bad and not aloha_bad
    detail = f"bandwidth-limited {100 - len(bw_bad)}/100 exact, ALOHA {100 - len(aloha_bad)}/100 exact"
    if aloha_bad:
        detail += f" (first ALOHA mismatch wc/v, A, got, expected = {aloha_bad[0]})"
    report(2, ok, detail)


def binomial_grid_oracle(N, capacity, eps, wc, step):
    """Independent grid search of E[m (P(m) - wc)] with m ~ Binomial(N, p)."""
    m = np.arange(N + 1)
    per_m = m * (np.array([p_success_bw(int(k), capacity, eps) if k else 0.0 for k in m]) - wc)
    log_choose = gammaln(N + 1) - gammaln(m + 1) - gammaln(N - m + 1)
    grid = np.arange(step, 1.0, step)
    best_p, best = 0.0, 0.0
    for chunk in np.array_split(grid, 50):
        logp = log_choose[None, :] + m[None, :] * np.log(chunk)[:, None] + (N - m)[None, :] * np.log1p(-chunk)[:, None]
        vals = np.exp(logp) @ per_m
        k = int(np.argmax(vals))
        if vals[k] > best:
            best, best_p = float(vals[k]), float(chunk[k])
    return best_p


def test_criterion_3_stochastic_optimum():
    N, C, eps, wc = 200, 8, 0.001, 0.5
    p_star = optimal_p_uniform(1.0, wc, bw_curve(C, eps), N)
    p_grid = binomial_grid_oracle(N, C, eps, wc, 1e-5)
    ok = C / N / 2 <= p_star <= 2 * C / N and abs(p_star - p_grid) <= 1e-3
    report(3, ok, f"p*={p_star:.5f}, C/N={C / N:.3f}, grid oracle={p_grid:.5f}")


def test_criterion_4_channel_properties():
    n = np.arange(1, 10_001)
    bw_ok = bool(all(
        np.all(np.diff([p_success_bw(int(k), C, eps) for k in n]) <= 0)
        for C, eps in ((1, 0.0), (2, 0.001), (8, 0.01), (50, 0.1))
    ))
    aloha_ok = bool(all(np.all(np.diff([p_success_aloha(int(k), A) for k in n]) <= 0) for A in (1, 10, 20, 100)))
    peaks = []
    for A in (10, 20, 100):
        thr = n * np.array([p_success_aloha(int(k), A) for k in n])
        peaks.append(bool(int(n[np.argmax(thr)]) == A // 2 and abs(thr.max() - 0.5 * A / math.e) <= 1e-9))
    report(4, bw_ok and aloha_ok and all(peaks), f"monotone bw={bw_ok} aloha={aloha_ok}, throughput peaks at A/2 for A=10,20,100: {peaks}")


def test_criterion_5_data_value_identity():
    cfg = ExperimentConfig(num_sensors=25, area=500.0, scenario_count=100, eval_episodes=100, horizon=30, master_seed=11)
    env = Environment(cfg)
    bad_steps = steps = 0
    for k, index in enumerate(env.eval_indices):
        spec = PolicySpec(("random_p", "heuristic", "stochastic_uniform", "centralized_greedy")[k % 4], p=0.5)
        rec = Recorder(make_controller(spec, env.n))
        record = run_episode(env, index, rec, episode_rng(cfg.master_seed, 1, k))
        traj = env.trajectory(index)
        for t, (x, z, after) in enumerate(replay_persistence(traj, rec.succeeded)):
            ok = rec.succeeded[t]
            value = float(np.count_nonzero((x != z)[ok]))
            m_loss = float(np.count_nonzero(x != z))
            loss = float(np.count_nonzero(x != after))
            steps += 1
            consistent = (value, m_loss, loss) == (record.data_value[t], record.model_loss[t], record.error_loss[t])
            bad_steps += not (consistent and value == m_loss - loss)
    report(5, bad_steps == 0, f"{steps - bad_steps}/{steps} steps satisfy sum of values = model loss - error loss")


def test_criterion_6_heuristic_sends_exactly_the_mismatches():
    cfg = ExperimentConfig(num_sensors=50, area=800.0, scenario_count=100, eval_episodes=100, horizon=40, master_seed=5)
    env = Environment(cfg)
    bad = steps = 0
    for k, index in enumerate(env.eval_indices):
        rec = Recorder(make_controller(PolicySpec("heuristic"), env.n))
        run_episode(env, index, rec, episode_rng(cfg.master_seed, 1, k))
        for t, (x, z, _) in enumerate(replay_persistence(env.trajectory(index), rec.succeeded)):
            steps += 1
            bad += not np.array_equal(rec.attempted[t], x != z)
    report(6, bad == 0, f"{steps - bad}/{steps} steps with attempted set equal to the mismatch set")


@pytest.fixture(scope="module")
def learning_env():
    return Environment(learning_config())


def test_criterion_7_learning_sanity(learning_env):
    cfg = learning_config()
    start = time.perf_counter()
    random30 = run_evaluation(cfg.with_policy(kind="random_p", p=0.3), env=learning_env)
    results = {}
    for name, fb in (("envsen_iql", False), ("envsen_pg", False), ("envsen_pg_fb", True)):
        kind = name.split("_")[1]
        pol = cfg.with_policy(kind=kind, reward="envsen", use_feedback=fb)
        runs = [run_evaluation(pol, train(pol, env=learning_env, seed=s).agents, learning_env) for s in SEEDS]
        results[name] = (np.mean([r.mean_reward for r in runs]), np.mean([r.mean_error_loss for r in runs]))
    elapsed = time.perf_counter() - start
    beats = all(results[n][0] >= random30.mean_reward and results[n][1] <= random30.mean_error_loss for n in ("envsen_iql", "envsen_pg"))
    fb_ok = results["envsen_pg_fb"][0] >= results["envsen_pg"][0]
    summary = ", ".join(f"{n} reward {r:.2f} loss {l:.3f}" for n, (r, l) in results.items())
    detail = f"random_30 reward {random30.mean_reward:.2f} loss {random30.mean_error_loss:.3f}; {summary}; {elapsed:.0f} s"
    report(7, beats and fb_ok and elapsed < 900, detail)


def settling_episode(eval_curve, band=0.05):
    """First checkpoint after which every later evaluation stays within ``band`` of the final one."""
    episodes = np.array([e for e, _ in eval_curve])
    rewards = np.array([r for _, r in eval_curve])
    outside = np.nonzero(np.abs(rewards - rewards[-1]) > band * abs(rewards[-1]))[0]
    return int(episodes[outside[-1] + 1]) if len(outside) else 0


def test_criterion_8_local_reward_settles_faster(learning_env):
    cfg = learning_config()
    settle, final = {}, {}
    for reward in ("envsen", "tracking"):
        pol = cfg.with_policy(kind="iql", reward=reward)
        curves = [train(pol, env=learning_env, seed=s, eval_every=20).eval_curve for s in SEEDS]
        settle[reward] = float(np.mean([settling_episode(c) for c in curves]))
        final[reward] = float(np.mean([c[-1][1] for c in curves]))
    detail = (
        f"mean settling episode: local reward {settle['envsen']:.0f} (final eval reward {final['envsen']:.2f}), "
        f"tracking reward {settle['tracking']:.0f} (final eval reward {final['tracking']:.2f})"
    )
    report(8, settle["envsen"] < settle["tracking"], detail)


def test_criterion_9_tradeoff_sweep():
    cfg = ExperimentConfig(num_sensors=100, area=1400.0, scenario_count=60, eval_episodes=30, horizon=60)
    ws = [0.05, 0.1, 0.2, 0.4, 0.8]
    rows = sweep_w(cfg, ws, [{"kind": "stochastic_uniform"}, {"kind": "heuristic"}, {"kind": "random_p", "p": 0.3}])
    by = {}
    for r in rows:
        by.setdefault(r.policy, []).append(r)
    stoch_cost = [r.mean_cost for r in by["stochastic_uniform"]]
    non_increasing = all(b <= a for a, b in zip(stoch_cost, stoch_cost[1:]))

    def spread(vals):
        return (max(vals) - min(vals)) / max(abs(np.mean(vals)), 1e-12)

    flat = {name: max(spread([r.mean_cost for r in by[name]]), spread([r.mean_error_loss for r in by[name]])) for name in ("heuristic", "random_30")}
    ok = non_increasing and all(v < 0.05 for v in flat.values())
    detail = f"stochastic cost {[round(c, 2) for c in stoch_cost]}; relative spread heuristic {flat['heuristic']:.3f}, random_30 {flat['random_30']:.3f}"
    report(9, ok, detail)


def test_criterion_10_reproducible_cli(tmp_path, monkeypatch):
    small = ["--override", "num_sensors=30", "--override", "area=600", "--override", "scenario_count=20",
             "--override", "eval_episodes=6", "--override", "horizon=15", "--seed", "42"]
    commands = [
        ["simulate", "--policy", "stochastic_uniform"],
        ["evaluate", "--policy", "optimal_async"],
        ["train", "--policy", "envsen_iql_fb", "--episodes", "8"],
        ["sweep", "--w", "0.1,0.8"],
        ["oracle", "--n", "6", "--instances", "20"],
    ]
    outputs = {}
    for label, threads in (("a", "1"), ("b", "4"), ("c", "4")):
        monkeypatch.setenv("ENVSEN_THREADS", threads)
        for k, cmd in enumerate(commands):
            out = tmp_path / label / str(k)
            assert cli_main([*cmd, "--out", str(out), *small]) == 0
        outputs[label] = {p.relative_to(tmp_path / label): p.read_bytes() for p in sorted((tmp_path / label).rglob("*")) if p.is_file()}
    files = len(outputs["a"])
    same = outputs["a"] == outputs["b"] == outputs["c"]
    report(10, same and files > 0, f"{files} output files byte-identical across ENVSEN_THREADS=1, 4 and a repeat run")
