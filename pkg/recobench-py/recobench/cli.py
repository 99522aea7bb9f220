from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, NoReturn, Sequence

import numpy as np
import yaml

from .agent_dqn import EPSILON_SCHEDULE_NAMES, LOSS_NAMES, DqnConfig
from .agent_pg import PgConfig
from .bench_harness import (AGENT_KIND_NAMES, ExperimentConfig, agent_kind_from_name, check_scale, compare_results,
                            evaluate, export_comparison, final_score, load_agent, run_experiment, run_sweep)
from .errors import ConfigError, RecoBenchError
from .sim_env import EnvConfig, Environment
from .tensor_nn import OPTIMIZER_KIND_NAMES, run_gradcheck_suite

EXIT_OK                = 0
EXIT_USAGE             = 1
EXIT_RUN_FAILURE       = 2
EXIT_GRADCHECK_FAILURE = 3

DEFAULT_EPISODES = 200
DEFAULT_RUNS     = 50


class UsageErrorParser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_bool(value: str | bool) -> bool:
    if isinstance(value, bool):
        return value
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def parse_axis(value: str | Sequence[int]) -> list[int]:
    if not isinstance(value, str):
        return [int(v) for v in value]
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of integers, got {value!r}")


def parse_agents(value: str | Sequence[str]) -> list[str]:
    names = value.split(",") if isinstance(value, str) else list(value)
    names = [n.strip() for n in names if n.strip()]
    for name in names:
        if name not in AGENT_KIND_NAMES.values():
            raise argparse.ArgumentTypeError(f"unknown agent {name!r}, expected one of {sorted(AGENT_KIND_NAMES.values())}")
    return names


def add_common_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config",  type=Path,           help="YAML or JSON file with default values for the flags below (keys are flag names)")
    parser.add_argument("--verbose", action="store_true", help="log per-episode detail")
    parser.add_argument("--quiet",   action="store_true", help="only log warnings and errors")


def add_env_args(parser: argparse.ArgumentParser, sizes: bool = True) -> None:
    env = EnvConfig()
    if sizes:
        parser.add_argument("--users",             type=int,   default=env.num_users,             help=f"number of simulated users (default: {env.num_users})")
        parser.add_argument("--items",             type=int,   default=env.num_items,             help=f"number of items (default: {env.num_items})")
    parser.add_argument("--features",          type=int,   default=env.num_features,          help=f"latent features per user/item (default: {env.num_features})")
    parser.add_argument("--target-random-ctr", type=float, default=env.target_random_ctr,     help=f"calibrated CTR of random recommendations (default: {env.target_random_ctr})")
    parser.add_argument("--max-steps",         type=int,   default=env.max_steps_per_episode, help=f"hard cap on steps per episode (default: {env.max_steps_per_episode})")
    parser.add_argument("--click-scale",       type=float, default=env.click_scale,           help=f"slope of the logistic click model (default: {env.click_scale})")
    parser.add_argument("--full-scale",        action="store_true",                           help="allow more than 1000 users or items (slow)")


def add_agent_args(parser: argparse.ArgumentParser) -> None:
    dqn, pg = DqnConfig(), PgConfig()
    parser.add_argument("--loss",                   choices=list(LOSS_NAMES.values()), default="huber",   help="DQN regression loss (default: huber)")
    parser.add_argument("--gamma",                  type=float, default=dqn.gamma,                        help=f"discount factor (default: {dqn.gamma})")
    parser.add_argument("--lr",                     type=float, default=dqn.learning_rate,                help=f"learning rate (default: {dqn.learning_rate})")
    parser.add_argument("--optimizer",              choices=list(OPTIMIZER_KIND_NAMES.values()), default=dqn.optimizer, help=f"optimizer (default: {dqn.optimizer})")
    parser.add_argument("--history-len",            type=int,   default=dqn.history_length,               help=f"viewed items kept in the state (default: {dqn.history_length})")
    parser.add_argument("--embedding-dim",          type=int,   default=dqn.embedding_dim,                help=f"item embedding size (default: {dqn.embedding_dim})")
    parser.add_argument("--hidden-units",           type=int,   default=dqn.hidden_units,                 help=f"LSTM/conv/dense width (default: {dqn.hidden_units})")
    parser.add_argument("--replay-capacity",        type=int,   default=dqn.replay_capacity,              help=f"DQN replay memory size (default: {dqn.replay_capacity})")
    parser.add_argument("--batch-size",             type=int,   default=dqn.minibatch_size,               help=f"DQN minibatch size (default: {dqn.minibatch_size})")
    parser.add_argument("--kernel-width",           type=int,   default=dqn.conv_kernel_width,            help=f"DQN conv1d kernel width (default: {dqn.conv_kernel_width})")
    parser.add_argument("--epsilon-horizon",        type=int,   default=dqn.epsilon_horizon,              help=f"bandit steps over which epsilon anneals 0.9 -> 0.1 (default: {dqn.epsilon_horizon})")
    parser.add_argument("--epsilon-schedule",       choices=list(EPSILON_SCHEDULE_NAMES.values()), default="per-episode", help="reset epsilon every episode or anneal once (default: per-episode)")
    parser.add_argument("--epsilon-global-horizon", type=int,   default=dqn.epsilon_global_horizon,       help=f"horizon of the global schedule (default: {dqn.epsilon_global_horizon})")
    parser.add_argument("--huber-delta",            type=float, default=dqn.huber_delta,                  help=f"Huber threshold (default: {dqn.huber_delta})")
    parser.add_argument("--target-network",         type=parse_bool, default=dqn.use_target_network,      help="bootstrap DQN targets from a periodically synced copy (default: false)")
    parser.add_argument("--target-update-interval", type=int,   default=dqn.target_update_interval,       help=f"train steps between target syncs (default: {dqn.target_update_interval})")
    parser.add_argument("--normalize-returns",      type=parse_bool, default=pg.normalize_returns,        help="standardise PG returns per update (default: true)")
    parser.add_argument("--episodes-per-update",    type=int,   default=pg.episodes_per_update,           help=f"PG episodes per policy update (default: {pg.episodes_per_update})")


def add_run_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--episodes",    type=int,  default=DEFAULT_EPISODES, help=f"training episodes per run (default: {DEFAULT_EPISODES})")
    parser.add_argument("--runs",        type=int,  default=DEFAULT_RUNS,     help=f"independent runs to average (default: {DEFAULT_RUNS})")
    parser.add_argument("--seed",        type=int,  default=0,                help="seed of the first run; run i uses seed + i (default: 0)")
    parser.add_argument("--out",         type=Path, default=Path("results"),  help="output directory (default: results)")
    parser.add_argument("--concurrency", type=int,  default=1,                help="runs executed in parallel worker processes (default: 1)")
    parser.add_argument("--progress",    action="store_true",                 help="show a progress bar over runs")


def build_parser() -> tuple[UsageErrorParser, dict[str, argparse.ArgumentParser]]:
    parser = UsageErrorParser(prog="recobench", description="Deep RL recommender benchmark on a simulated organic/bandit user process")
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    subparsers.required = True

    train = subparsers.add_parser("train", help="train one agent kind for several runs and write CTR curves")
    add_common_args(train)
    train.add_argument("--agent", choices=list(AGENT_KIND_NAMES.values()), default="dqn-lstm", help="agent to train (default: dqn-lstm)")
    add_env_args(train)
    add_agent_args(train)
    add_run_args(train)
    train.add_argument("--save-model", action="store_true", help="write the first run's agent to <out>/model.json")

    sweep = subparsers.add_parser("sweep", help="final scores over a users x items grid")
    add_common_args(sweep)
    sweep.add_argument("--agents",    type=parse_agents, default="dqn-lstm,pg,random", help="comma separated agent kinds (default: dqn-lstm,pg,random)")
    sweep.add_argument("--user-axis", type=parse_axis,   default="10,100,1000",        help="strictly increasing user counts (default: 10,100,1000)")
    sweep.add_argument("--item-axis", type=parse_axis,   default="10,100,1000",        help="strictly increasing item counts (default: 10,100,1000)")
    # the axes set the sizes of every cell
    add_env_args(sweep, sizes=False)
    add_agent_args(sweep)
    add_run_args(sweep)

    gradcheck = subparsers.add_parser("gradcheck", help="check analytic gradients of every layer and loss")
    add_common_args(gradcheck)
    gradcheck.add_argument("--tolerance", type=float, default=1e-4, help="maximum relative error (default: 1e-4)")

    evaluation = subparsers.add_parser("eval", help="play episodes with a saved agent, without training")
    add_common_args(evaluation)
    evaluation.add_argument("--model",    type=Path, required=True, help="model.json written by train --save-model")
    add_env_args(evaluation)
    evaluation.add_argument("--episodes", type=int,  default=100,   help="episodes to play (default: 100)")
    evaluation.add_argument("--seed",     type=int,  default=0,     help="environment and action seed (default: 0)")

    compare = subparsers.add_parser("compare", help="ratio of the final scores of two written experiments")
    add_common_args(compare)
    compare.add_argument("result",    type=Path, help="experiment directory or its aggregate.csv")
    compare.add_argument("reference", type=Path, help="experiment directory or aggregate.csv to divide by")
    compare.add_argument("--out",     type=Path, help="append the comparison to this CSV file")

    return parser, {"train": train, "sweep": sweep, "gradcheck": gradcheck, "eval": evaluation, "compare": compare}


def load_config_file(path: Path) -> dict[str, Any]:
    with open(path) as fp:
        props = yaml.safe_load(fp) or {}
    if not isinstance(props, dict):
        raise ConfigError("config", f"{path} must hold a mapping of flag names to values")
    # like the CLI, property names do not differentiate between hyphens and underscores
    return {str(key).replace("_", "-"): value for key, value in props.items()}


def apply_config_file(subparser: argparse.ArgumentParser, props: dict[str, Any]) -> None:
    """Turn config-file values into parser defaults, so explicit flags still win."""
    by_flag = {opt[2:]: action.dest for action in subparser._actions for opt in action.option_strings if opt.startswith("--")}
    defaults: dict[str, Any] = {}
    unused: dict[str, Any] = {}
    for key, value in props.items():
        if key in by_flag and key != "config":
            defaults[by_flag[key]] = value
        else:
            unused[key] = value
    subparser.set_defaults(**defaults)
    if unused:
        print("The config file contained the following unused properties:")
        for prop, value in unused.items():
            print(f"  {prop}: {value}")


def setup_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def env_config(args: argparse.Namespace, seed: int = 0) -> EnvConfig:
    return EnvConfig(
        num_users             = getattr(args, "users", EnvConfig.num_users),
        num_items             = getattr(args, "items", EnvConfig.num_items),
        num_features          = args.features,
        target_random_ctr     = args.target_random_ctr,
        max_steps_per_episode = args.max_steps,
        click_scale           = args.click_scale,
        seed                  = seed,
    )


def experiment_config(args: argparse.Namespace, agent: str) -> ExperimentConfig:
    dqn = DqnConfig(
        gamma                  = args.gamma,
        replay_capacity        = args.replay_capacity,
        minibatch_size         = args.batch_size,
        history_length         = args.history_len,
        embedding_dim          = args.embedding_dim,
        hidden_units           = args.hidden_units,
        learning_rate          = args.lr,
        use_target_network     = parse_bool(args.target_network),
        epsilon_horizon        = args.epsilon_horizon,
        epsilon_schedule       = args.epsilon_schedule,
        epsilon_global_horizon = args.epsilon_global_horizon,
        conv_kernel_width      = args.kernel_width,
        target_update_interval = args.target_update_interval,
        optimizer              = args.optimizer,
        huber_delta            = args.huber_delta,
    )
    pg = PgConfig(
        gamma               = args.gamma,
        history_length      = args.history_len,
        embedding_dim       = args.embedding_dim,
        lstm_units          = args.hidden_units,
        dense_units         = args.hidden_units,
        learning_rate       = args.lr,
        normalize_returns   = parse_bool(args.normalize_returns),
        episodes_per_update = args.episodes_per_update,
        optimizer           = args.optimizer,
    )
    return ExperimentConfig(
        agent       = agent_kind_from_name(agent),
        loss        = args.loss,
        env         = env_config(args),
        episodes    = args.episodes,
        runs        = args.runs,
        seed_base   = args.seed,
        output_dir  = str(args.out),
        dqn         = dqn,
        pg          = pg,
        concurrency = args.concurrency,
        full_scale  = args.full_scale,
        save_model  = getattr(args, "save_model", False),
        progress    = args.progress,
    )


def do_train(args: argparse.Namespace) -> int:
    config = experiment_config(args, args.agent)
    agg = run_experiment(config)
    mean, std = final_score(agg)
    print(f"{args.agent}: final CTR {mean:.5f} +/- {std:.5f} over {agg.n_runs} runs")
    print(f"Wrote {Path(args.out) / 'aggregate.csv'}")
    return EXIT_OK


def do_sweep(args: argparse.Namespace) -> int:
    base = experiment_config(args, args.agents[0])
    grid = run_sweep(args.agents, args.user_axis, args.item_axis, args.episodes, args.runs, base)
    for row in grid.rows:
        print(f"{row.users:>6} users {row.items:>6} items {row.agent:>9}: {row.score_mean:.5f} +/- {row.score_std:.5f}")
    print(f"Wrote {Path(args.out) / 'sweep.csv'}")
    if grid.failures:
        print(f"{len(grid.failures)} sweep cell(s) failed", file=sys.stderr)
        return EXIT_RUN_FAILURE
    return EXIT_OK


def do_gradcheck(args: argparse.Namespace) -> int:
    results = run_gradcheck_suite(args.tolerance)
    failed = 0
    for name, report in results:
        status = "ok" if report.passed else f"FAIL ({len(report.failures)} of {report.checked})"
        print(f"* {name:<16} max relative error {report.max_relative_error:.3e}  {status}")
        failed += not report.passed
    if failed:
        print(f"{failed} gradient check(s) failed", file=sys.stderr)
        return EXIT_GRADCHECK_FAILURE
    return EXIT_OK


def do_eval(args: argparse.Namespace) -> int:
    check_scale(args.users, args.items, args.full_scale)
    env = Environment.create(env_config(args, args.seed))
    agent = load_agent(args.model, rng=np.random.default_rng(args.seed))
    series = evaluate(agent, env, args.episodes)
    clicks, steps = int(series.clicks.sum()), int(series.bandit_steps.sum())
    ctr = clicks / steps if steps else 0.0
    print(f"{args.model}: CTR {ctr:.5f} ({clicks} clicks in {steps} recommendations over {args.episodes} episodes)")
    return EXIT_OK


def do_compare(args: argparse.Namespace) -> int:
    comparison = compare_results(args.result, args.reference)
    print(f"{comparison.result}: {comparison.score:.5f} / {comparison.reference_score:.5f} = ratio {comparison.ratio:.4f}")
    if args.out is not None:
        export_comparison(comparison, args.out)
        print(f"Wrote {args.out}")
    return EXIT_OK


COMMANDS = {
    "train":     do_train,
    "sweep":     do_sweep,
    "gradcheck": do_gradcheck,
    "eval":      do_eval,
    "compare":   do_compare,
}


def main(args_in: list[str] | None = None) -> int:
    parser, subparsers = build_parser()
    args = parser.parse_args(args_in)
    if args.config is not None:
        try:
            props = load_config_file(args.config)
        except (OSError, yaml.YAMLError, ConfigError) as e:
            print(f"recobench: error: cannot read config {args.config}: {e}", file=sys.stderr)
            return EXIT_USAGE
        print(f"* Using config: {args.config}")
        apply_config_file(subparsers[args.command], props)
        args = parser.parse_args(args_in)
    setup_logging(args)

    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"recobench: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RecoBenchError, OSError) as e:
        print(f"recobench: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUN_FAILURE


if __name__ == '__main__':
    sys.exit(main())
