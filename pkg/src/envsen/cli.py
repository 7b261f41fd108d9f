"""Command line entry point: ``envsen <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .channel import AnalyticChannel, BANDWIDTH_LIMITED
from .config import ConfigError, ExperimentConfig, load_config, parse_policy_name
from .harness import (
    Environment,
    aggregate,
    controller_factory,
    evaluate_records,
    sweep_w,
    train,
    write_aggregate,
)
from .learn import load_checkpoint, save_checkpoint
from .policy import brute_force_optimum, centralized_greedy, optimal_p_uniform, set_objective, expected_uniform_reward

DEFAULT_WS = (0.05, 0.1, 0.2, 0.4, 0.8)
DEFAULT_SWEEP_POLICIES = ("stochastic_uniform", "heuristic", "random_30")


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
    common.add_argument("--seed", type=_seed, help="master seed, overrides the config")
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("--policy", action="append", help="policy name, e.g. heuristic, random_30, envsen_pg_fb")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted config override, repeatable")

    parser = argparse.ArgumentParser(prog="envsen", description="Sensor communication policies for wildfire tracking.")
    sub = parser.add_subparsers(dest="command", required=True)
    simulate = sub.add_parser("simulate", parents=[common], help="run one policy, write per-episode CSVs")
    simulate.add_argument("--checkpoint", help="trained agents for a learned policy")
    evaluate = sub.add_parser("evaluate", parents=[common], help="evaluate a frozen policy, write an aggregate CSV")
    evaluate.add_argument("--checkpoint", help="trained agents for a learned policy")
    training = sub.add_parser("train", parents=[common], help="train a learned policy, write checkpoint and learning curve")
    training.add_argument("--episodes", type=int, help="training episodes, overrides the config")
    sweep = sub.add_parser("sweep", parents=[common], help="evaluate policies over a list of weights w")
    sweep.add_argument("--w", type=_float_list, default=list(DEFAULT_WS), help="comma-separated weights")
    oracle = sub.add_parser("oracle", parents=[common], help="check greedy and p* against brute force")
    oracle.add_argument("--n", type=int, default=10, help="largest instance size for the greedy check (<= 20)")
    oracle.add_argument("--instances", type=int, default=200, help="random instances for the greedy check")
    return parser


def resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config, args.override)
    if args.seed is not None:
        config = replace(config, master_seed=args.seed)
    return config.validate()


def _single_policy(args, config: ExperimentConfig) -> ExperimentConfig:
    if not args.policy:
        return config
    if len(args.policy) > 1:
        raise ConfigError(f"{args.command} takes one --policy")
    return config.with_policy(**parse_policy_name(args.policy[0])).validate()


def _agents_for(config: ExperimentConfig, env: Environment, checkpoint: str | None):
    if not config.policy.learned:
        return None
    path = checkpoint or config.policy.checkpoint
    if path:
        if not Path(path).is_file():
            raise ConfigError(f"checkpoint not found: {path}")
        agents = load_checkpoint(path)
        if agents.kind != config.policy.kind:
            raise ConfigError(f"checkpoint holds {agents.kind!r} agents, policy is {config.policy.kind!r}")
        return agents
    return train(config, env=env).agents


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    config = _single_policy(args, resolve_config(args))
    env = Environment(config)
    agents = _agents_for(config, env, args.checkpoint)
    records = evaluate_records(config, controller_factory(config, agents), env)
    out = _out_dir(args)
    (out / "config.json").write_text(config.to_json() + "\n")
    width = max(3, len(str(len(records) - 1)))
    for k, rec in enumerate(records):
        rec.write_csv(out / f"episode_{k:0{width}d}.csv")
    write_aggregate([aggregate(config.policy.name, config.w, records)], out / "summary.csv")
    print(f"wrote {len(records)} episodes to {out}")
    return 0


def cmd_evaluate(args) -> int:
    config = _single_policy(args, resolve_config(args))
    env = Environment(config)
    agents = _agents_for(config, env, args.checkpoint)
    records = evaluate_records(config, controller_factory(config, agents), env)
    out = _out_dir(args)
    row = aggregate(config.policy.name, config.w, records)
    write_aggregate([row], out / "aggregate.csv")
    print(f"{row.policy}: mean reward {row.mean_reward:.4f} over {len(records)} episodes")
    return 0


def cmd_train(args) -> int:
    config = _single_policy(args, resolve_config(args))
    if not config.policy.learned:
        raise ConfigError(f"policy {config.policy.name!r} is not trainable; use iql or pg")
    if args.episodes is not None:
        if args.episodes < 1:
            raise ConfigError("--episodes must be >= 1")
        config = replace(config, training_episodes=args.episodes)
    result = train(config)
    out = _out_dir(args)
    meta = {"policy": config.policy.name, "master_seed": config.master_seed, "episodes": config.training_episodes, "w": config.w}
    save_checkpoint(result.agents, out / "checkpoint.json", meta)
    result.write_curve(out / "learning_curve.csv")
    print(f"trained {config.policy.name} for {config.training_episodes} episodes")
    return 0


def cmd_sweep(args) -> int:
    config = resolve_config(args)
    if not args.w:
        raise ConfigError("--w needs at least one weight")
    names = args.policy or list(DEFAULT_SWEEP_POLICIES)
    policies = [replace(config.policy, **parse_policy_name(n)) for n in names]
    for pol in policies:
        replace(config, policy=pol).validate()
    rows = sweep_w(config, args.w, policies)
    out = _out_dir(args)
    write_aggregate(rows, out / "tradeoff.csv")
    print(f"wrote {len(rows)} rows to {out / 'tradeoff.csv'}")
    return 0


def cmd_oracle(args) -> int:
    config = resolve_config(args)
    if not 1 <= args.n <= 20:
        raise ConfigError("--n must lie in [1, 20]")
    if args.instances < 1:
        raise ConfigError("--instances must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([config.master_seed, 3]))
    curve = AnalyticChannel(BANDWIDTH_LIMITED, capacity=2, epsilon=0.001, num_channels=1).curve()
    wc = 0.2
    rows = []
    for k in range(args.instances):
        n = int(rng.integers(1, args.n + 1))
        values = rng.integers(0, 2, size=n).astype(float)
        costs = np.full(n, wc)
        chosen = centralized_greedy(values, costs, curve)
        greedy = set_objective(chosen, values, costs, curve)
        _, best = brute_force_optimum(values, costs, curve)
        rows.append((k, n, greedy, best, greedy == best))
    greedy_ok = all(r[4] for r in rows)

    # p* against a plain grid over the uniform-sensor objective
    n_sensors, grid_step = 2 * args.n, 1e-3
    p_star = optimal_p_uniform(1.0, 0.5, curve, n_sensors)
    grid = np.arange(0.0, 1.0 + grid_step / 2, grid_step)
    scores = [expected_uniform_reward(float(p), 1.0, 0.5, curve, n_sensors) for p in grid]
    p_grid = float(grid[int(np.argmax(scores))])
    p_ok = expected_uniform_reward(p_star, 1.0, 0.5, curve, n_sensors) >= max(scores) - 1e-12

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "oracle.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["instance", "n", "greedy_objective", "brute_force_objective", "match"])
        writer.writerows(rows)
    print(f"greedy vs brute force: {'PASS' if greedy_ok else 'FAIL'} ({sum(r[4] for r in rows)}/{len(rows)} instances)")
    print(f"optimal p vs grid: {'PASS' if p_ok else 'FAIL'} (p*={p_star:.6f}, grid best={p_grid:.3f}, N={n_sensors})")
    return 0 if greedy_ok and p_ok else 1


COMMANDS = {
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "oracle": cmd_oracle,
}


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"envsen {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())
