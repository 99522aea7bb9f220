from __future__ import annotations

import collections
import concurrent.futures
import csv
import functools
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Iterable, Iterator, Sequence, TypeVar, Union

import numpy as np
from tqdm import tqdm

from .agent_dqn import LOSS_NAMES, DqnAgent, DqnConfig, LossKind, ValueNet, enum_from_name, run_dqn_episode
from .agent_pg import PgAgent, PgConfig, run_pg_episode
from .errors import ConfigError, RecoBenchError, RunError
from .model_file import load_network
from .sim_env import EnvConfig, Environment, EpisodeStats, Phase

if TYPE_CHECKING:
    from typing import TypeAlias

logger = logging.getLogger(__name__)

NDArray: TypeAlias = 'np.ndarray[Any, Any]'

#
# constants
#

MOVING_AVERAGE_WINDOW = 50
FINAL_SCORE_FRACTION  = 0.10
FINAL_SCORE_MIN       = 10
DESK_SCALE_LIMIT      = 1_000
FLOAT_FORMAT          = '.17g'

RUN_CSV_HEADER       = ["episode", "ctr", "ctr_ma", "bandit_steps", "clicks"]
AGGREGATE_CSV_HEADER = ["episode", "ctr_mean", "ctr_std", "n_runs"]
SWEEP_CSV_HEADER     = ["users", "items", "log10_users", "log10_items", "agent", "score_mean", "score_std", "runs"]
COMPARE_CSV_HEADER   = ["result", "reference", "score", "reference_score", "ratio"]


class AgentKind(IntEnum):
    DQN_CNN  = 0
    DQN_LSTM = 1
    PG       = 2
    RANDOM   = 3


AGENT_KIND_NAMES: dict[AgentKind, str] = {
    AgentKind.DQN_CNN:  "dqn-cnn",
    AgentKind.DQN_LSTM: "dqn-lstm",
    AgentKind.PG:       "pg",
    AgentKind.RANDOM:   "random",
}


def agent_kind_from_name(name: str | AgentKind) -> AgentKind:
    return AgentKind(enum_from_name(AGENT_KIND_NAMES, name, "agent"))


#
# configuration
#


@dataclass
class ExperimentConfig:
    agent: AgentKind = AgentKind.DQN_LSTM
    loss: LossKind = LossKind.HUBER
    env: EnvConfig = field(default_factory = EnvConfig)
    episodes: int = 200
    runs: int = 50
    seed_base: int = 0
    output_dir: str | None = None
    dqn: DqnConfig = field(default_factory = DqnConfig)
    pg: PgConfig = field(default_factory = PgConfig)
    concurrency: int = 1
    full_scale: bool = False
    save_model: bool = False
    progress: bool = False

    def __post_init__(self) -> None:
        self.agent = agent_kind_from_name(self.agent)
        self.loss  = LossKind(enum_from_name(LOSS_NAMES, self.loss, "loss"))

    def validate(self) -> None:
        if self.episodes < 1:
            raise ConfigError("episodes", f"must be positive, got {self.episodes}")
        if self.runs < 1:
            raise ConfigError("runs", f"must be positive, got {self.runs}")
        if self.concurrency < 1:
            raise ConfigError("concurrency", f"must be positive, got {self.concurrency}")
        if self.seed_base < 0:
            raise ConfigError("seed", f"must be non-negative, got {self.seed_base}")
        self.env.validate()
        check_scale(self.env.num_users, self.env.num_items, self.full_scale)
        if self.agent in (AgentKind.DQN_CNN, AgentKind.DQN_LSTM):
            self.dqn_config(0).validate()
        elif self.agent == AgentKind.PG:
            self.pg.validate()

    def dqn_config(self, seed: int) -> DqnConfig:
        value_net = ValueNet.CONV1D if self.agent == AgentKind.DQN_CNN else ValueNet.LSTM
        return replace(self.dqn, value_net = value_net, loss = self.loss, seed = seed)

    def to_dict(self) -> dict[str, Any]:
        return {
            "agent":       AGENT_KIND_NAMES[self.agent],
            "loss":        LOSS_NAMES[self.loss],
            "env":         self.env.to_dict(),
            "episodes":    self.episodes,
            "runs":        self.runs,
            "seed_base":   self.seed_base,
            "dqn":         self.dqn_config(self.dqn.seed).to_dict(),
            "pg":          self.pg.to_dict(),
            "concurrency": self.concurrency,
            "full_scale":  self.full_scale,
        }


def check_scale(num_users: int, num_items: int, full_scale: bool) -> None:
    largest = max(num_users, num_items)
    if largest <= DESK_SCALE_LIMIT:
        return
    if not full_scale:
        raise ConfigError("full_scale", f"{num_users} users x {num_items} items exceeds the desk-scale limit of {DESK_SCALE_LIMIT}; pass --full-scale to run it")
    logger.warning("full-scale run with %d users x %d items: expect hours of runtime per run", num_users, num_items)


#
# result types
#


def moving_average(values: NDArray, window: int = MOVING_AVERAGE_WINDOW) -> NDArray:
    """Trailing mean over `window` episodes; the first window-1 entries average the available prefix."""
    values = np.asarray(values, dtype = np.float64)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx  = np.arange(1, len(values) + 1)
    lo   = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


@dataclass
class CTRSeries:
    seed: int
    ctr: NDArray
    bandit_steps: NDArray
    clicks: NDArray

    @staticmethod
    def from_stats(seed: int, stats: Sequence[EpisodeStats]) -> CTRSeries:
        return CTRSeries(
            seed         = seed,
            ctr          = np.array([s.ctr for s in stats], dtype = np.float64),
            bandit_steps = np.array([s.bandit_steps for s in stats], dtype = np.int64),
            clicks       = np.array([s.clicks for s in stats], dtype = np.int64),
        )

    @property
    def moving_average(self) -> NDArray:
        return moving_average(self.ctr)

    def __len__(self) -> int:
        return len(self.ctr)


@dataclass
class AggregateSeries:
    mean: NDArray
    std: NDArray
    n_runs: int

    def __len__(self) -> int:
        return len(self.mean)


def aggregate(series: Sequence[CTRSeries]) -> AggregateSeries:
    if not series:
        raise ConfigError("runs", "nothing to aggregate")
    lengths = {len(s) for s in series}
    if len(lengths) != 1:
        raise ConfigError("episodes", f"runs have different lengths {sorted(lengths)}")
    stacked = np.stack([s.ctr for s in series])
    return AggregateSeries(stacked.mean(axis = 0), stacked.std(axis = 0), len(series))


@dataclass
class SweepRow:
    users: int
    items: int
    agent: str
    score_mean: float
    score_std: float
    runs: int


@dataclass
class SweepGrid:
    user_axis: list[int]
    item_axis: list[int]
    rows: list[SweepRow] = field(default_factory = list)
    failures: list[tuple[int, int, str, str]] = field(default_factory = list)


@dataclass
class Comparison:
    result: str
    reference: str
    score: float
    reference_score: float
    ratio: float


#
# agents
#


class RandomAgent:
    """Uniformly random recommendations; the CTR baseline."""

    def __init__(self, num_items: int, rng: np.random.Generator):
        self.num_items = num_items
        self.rng = rng


def run_random_episode(agent: RandomAgent, env: Environment, train: bool = True) -> EpisodeStats:
    stats = EpisodeStats()
    result = env.reset()
    while not result.done:
        if result.phase == Phase.BANDIT:
            result = env.step(int(agent.rng.integers(0, agent.num_items)))
            stats.bandit_steps += 1
            stats.clicks += result.reward
        else:
            result = env.step(None)
    return stats


Agent = Union[DqnAgent, PgAgent, RandomAgent]


def make_agent(config: ExperimentConfig, num_items: int, init_seed: int, rng: np.random.Generator) -> Agent:
    if config.agent == AgentKind.RANDOM:
        return RandomAgent(num_items, rng)
    if config.agent == AgentKind.PG:
        return PgAgent(replace(config.pg, seed = init_seed), num_items, rng = rng)
    return DqnAgent(config.dqn_config(init_seed), num_items, rng = rng)


def run_episode(agent: Agent, env: Environment, train: bool = True) -> EpisodeStats:
    if isinstance(agent, DqnAgent):
        return run_dqn_episode(agent, env, train)
    if isinstance(agent, PgAgent):
        return run_pg_episode(agent, env, train)
    return run_random_episode(agent, env, train)


def load_agent(path: os.PathLike[str] | str, rng: np.random.Generator | None = None) -> DqnAgent | PgAgent:
    network, metadata = load_network(path)
    kind = metadata.get("agent")
    agent: DqnAgent | PgAgent
    if kind == "dqn":
        agent = DqnAgent.from_checkpoint(network, metadata)
    elif kind == "pg":
        agent = PgAgent.from_checkpoint(network, metadata)
    else:
        raise ConfigError("model", f"{path} holds no agent checkpoint (agent = {kind!r})")
    if rng is not None:
        agent.rng = rng
    return agent


def evaluate(agent: Agent, env: Environment, episodes: int) -> CTRSeries:
    """Plays `episodes` episodes without any learning."""
    stats = [run_episode(agent, env, train = False) for _ in range(episodes)]
    return CTRSeries.from_stats(env.config.seed, stats)


#
# parallel map
#

In = TypeVar('In')
Out = TypeVar('Out')

def bounded_parallel_map(func: Callable[[In], Out], iterable: Iterable[In], concurrency: int) -> Iterator[Out]:
    '''Maps `func` over `iterable` in worker processes, keeping at most
    `concurrency` runs in flight. Results come back in input order, so a
    slow consumer holds back new submissions instead of piling up results.'''
    if concurrency < 2:
        yield from map(func, iterable)
        return
    pending = iter(iterable)
    with ProcessPoolExecutor(max_workers = concurrency) as executor:
        in_flight: collections.deque[concurrent.futures.Future[Out]] = collections.deque(
            executor.submit(func, item) for item in itertools.islice(pending, concurrency))
        while in_flight:
            result = in_flight.popleft().result()
            for item in itertools.islice(pending, 1):
                in_flight.append(executor.submit(func, item))
            yield result


#
# experiments
#


@dataclass
class RunResult:
    series: CTRSeries
    agent: Agent | None = None


def run_seeds(seed: int) -> tuple[int, int, np.random.Generator]:
    """Independent (environment seed, network-init seed, action RNG) for one run."""
    env_seq, init_seq, action_seq = np.random.SeedSequence(seed).spawn(3)
    env_seed  = int(env_seq.generate_state(1, np.uint64)[0])
    init_seed = int(init_seq.generate_state(1, np.uint64)[0])
    return env_seed, init_seed, np.random.default_rng(action_seq)


def run_single(config: ExperimentConfig, run_index: int, keep_agent: bool = False) -> RunResult:
    seed = config.seed_base + run_index
    try:
        env_seed, init_seed, rng = run_seeds(seed)
        env = Environment.create(replace(config.env, seed = env_seed))
        agent = make_agent(config, env.num_items, init_seed, rng)
        stats = [run_episode(agent, env, train = True) for _ in range(config.episodes)]
    except (RecoBenchError, ArithmeticError, ValueError) as e:
        raise RunError(seed, str(e)) from e
    series = CTRSeries.from_stats(seed, stats)
    logger.debug("run %d (seed %d): final moving-average CTR %.5f", run_index, seed, series.moving_average[-1])
    return RunResult(series, agent if keep_agent else None)


def _run_for_pool(config: ExperimentConfig, run_index: int) -> RunResult:
    return run_single(config, run_index, keep_agent = config.save_model and run_index == 0)


def run_experiment(config: ExperimentConfig) -> AggregateSeries:
    config.validate()
    name = AGENT_KIND_NAMES[config.agent]
    logger.info("%s: %d runs x %d episodes on %d users x %d items", name, config.runs, config.episodes,
                config.env.num_users, config.env.num_items)

    results: Iterable[RunResult] = bounded_parallel_map(functools.partial(_run_for_pool, config), range(config.runs), config.concurrency)
    if config.progress:
        results = tqdm(results, total = config.runs, desc = name, unit = "run")
    collected = list(results)
    series = [r.series for r in collected]
    agg = aggregate(series)

    if config.output_dir is not None:
        out = Path(config.output_dir)
        out.mkdir(parents = True, exist_ok = True)
        for s in series:
            export_csv(s, out / f"run-{s.seed}.csv")
        export_csv(agg, out / "aggregate.csv")
        with open(out / "config.json", "w") as fout:
            json.dump(config.to_dict(), fout, indent = 2, sort_keys = True)
            fout.write("\n")
        first = collected[0].agent
        if isinstance(first, (DqnAgent, PgAgent)):
            first.save_checkpoint(out / "model.json")
    return agg


def final_score(series: AggregateSeries | NDArray) -> tuple[float, float]:
    """Mean and std over the last ceil(10%) of episodes (at least 10, at most all)."""
    values = series.mean if isinstance(series, AggregateSeries) else np.asarray(series, dtype = np.float64)
    n = len(values)
    if n == 0:
        raise ConfigError("episodes", "cannot score an empty series")
    k = min(max(math.ceil(FINAL_SCORE_FRACTION * n), FINAL_SCORE_MIN), n)
    tail = values[-k:]
    return float(tail.mean()), float(tail.std())


def compare_ratio(a: AggregateSeries, b: AggregateSeries) -> float:
    if len(a) != len(b):
        raise ConfigError("episodes", f"cannot compare series of {len(a)} and {len(b)} episodes")
    num, _ = final_score(a)
    den, _ = final_score(b)
    if den == 0.0:
        ratio = math.inf if num > 0 else math.nan
        logger.warning("compare_ratio: reference score is zero, ratio is %s", ratio)
        return ratio
    return num / den


def aggregate_csv_path(path: os.PathLike[str] | str) -> Path:
    """An experiment output directory stands for the aggregate.csv inside it."""
    p = Path(path)
    return p / "aggregate.csv" if p.is_dir() else p


def compare_results(result: os.PathLike[str] | str, reference: os.PathLike[str] | str) -> Comparison:
    """compare_ratio of two written experiments, e.g. Huber against MSE at one item count."""
    result_csv, reference_csv = aggregate_csv_path(result), aggregate_csv_path(reference)
    a, b = read_aggregate_csv(result_csv), read_aggregate_csv(reference_csv)
    ratio = compare_ratio(a, b)
    return Comparison(str(result_csv), str(reference_csv), final_score(a)[0], final_score(b)[0], ratio)


def run_sweep(agents: Sequence[AgentKind | str], user_axis: Sequence[int], item_axis: Sequence[int],
              episodes: int, runs: int, base: ExperimentConfig | None = None) -> SweepGrid:
    """Every (users, items, agent) cell of the grid through run_experiment.

    A failing cell is logged and recorded in `failures`; the sweep carries on.
    """
    base = base if base is not None else ExperimentConfig()
    for axis_name, axis in (("user_axis", user_axis), ("item_axis", item_axis)):
        if len(axis) == 0:
            raise ConfigError(axis_name, "must not be empty")
        if any(b <= a for a, b in zip(axis, axis[1:])):
            raise ConfigError(axis_name, f"must be strictly increasing, got {list(axis)}")
        for value in axis:
            check_scale(value, 1, base.full_scale)
    kinds = [agent_kind_from_name(a) for a in agents]
    if not kinds:
        raise ConfigError("agents", "must not be empty")

    grid = SweepGrid(list(user_axis), list(item_axis))
    out = Path(base.output_dir) if base.output_dir is not None else None
    for users in user_axis:
        for items in item_axis:
            for kind in kinds:
                name = AGENT_KIND_NAMES[kind]
                cell = replace(base, agent = kind, episodes = episodes, runs = runs, save_model = False,
                               env = replace(base.env, num_users = users, num_items = items),
                               output_dir = str(out / f"users-{users}-items-{items}-{name}") if out is not None else None)
                try:
                    agg = run_experiment(cell)
                except RecoBenchError as e:
                    logger.warning("sweep cell %d users x %d items (%s) failed: %s", users, items, name, e)
                    grid.failures.append((users, items, name, str(e)))
                    continue
                mean, std = final_score(agg)
                grid.rows.append(SweepRow(users, items, name, mean, std, runs))
    if out is not None:
        export_csv(grid, out / "sweep.csv")
    return grid


#
# CSV
#


def _f(value: float) -> str:
    return format(float(value), FLOAT_FORMAT)


def export_csv(data: CTRSeries | AggregateSeries | SweepGrid, path: os.PathLike[str] | str) -> None:
    rows: Iterator[list[Any]]
    if isinstance(data, CTRSeries):
        header = RUN_CSV_HEADER
        ma = data.moving_average
        rows = ([i + 1, _f(data.ctr[i]), _f(ma[i]), int(data.bandit_steps[i]), int(data.clicks[i])] for i in range(len(data)))
    elif isinstance(data, AggregateSeries):
        header = AGGREGATE_CSV_HEADER
        rows = ([i + 1, _f(data.mean[i]), _f(data.std[i]), data.n_runs] for i in range(len(data)))
    else:
        header = SWEEP_CSV_HEADER
        rows = ([r.users, r.items, _f(math.log10(r.users)), _f(math.log10(r.items)), r.agent,
                 _f(r.score_mean), _f(r.score_std), r.runs] for r in data.rows)
    with open(path, "w", newline = "") as fout:
        writer = csv.writer(fout, lineterminator = "\n")
        writer.writerow(header)
        writer.writerows(rows)


def export_comparison(comparison: Comparison, path: os.PathLike[str] | str) -> None:
    """Appends one row; the header is written when the file is new."""
    new = not Path(path).exists()
    with open(path, "a", newline = "") as fout:
        writer = csv.writer(fout, lineterminator = "\n")
        if new:
            writer.writerow(COMPARE_CSV_HEADER)
        writer.writerow([comparison.result, comparison.reference, _f(comparison.score),
                         _f(comparison.reference_score), _f(comparison.ratio)])


def _read_rows(path: os.PathLike[str] | str, header: list[str]) -> list[list[str]]:
    with open(path, newline = "") as fp:
        reader = csv.reader(fp)
        found = next(reader, None)
        if found != header:
            raise ConfigError("csv", f"{path}: expected header {','.join(header)}, got {found}")
        return list(reader)


def read_run_csv(path: os.PathLike[str] | str, seed: int | None = None) -> CTRSeries:
    rows = _read_rows(path, RUN_CSV_HEADER)
    if seed is None:
        stem = Path(path).stem
        seed = int(stem.split("-", 1)[1]) if stem.startswith("run-") else 0
    return CTRSeries(
        seed         = seed,
        ctr          = np.array([float(r[1]) for r in rows], dtype = np.float64),
        bandit_steps = np.array([int(r[3]) for r in rows], dtype = np.int64),
        clicks       = np.array([int(r[4]) for r in rows], dtype = np.int64),
    )


def read_aggregate_csv(path: os.PathLike[str] | str) -> AggregateSeries:
    rows = _read_rows(path, AGGREGATE_CSV_HEADER)
    n_runs = int(rows[0][3]) if rows else 0
    return AggregateSeries(
        mean   = np.array([float(r[1]) for r in rows], dtype = np.float64),
        std    = np.array([float(r[2]) for r in rows], dtype = np.float64),
        n_runs = n_runs,
    )


def read_sweep_csv(path: os.PathLike[str] | str) -> list[SweepRow]:
    return [SweepRow(int(r[0]), int(r[1]), r[4], float(r[5]), float(r[6]), int(r[7]))
            for r in _read_rows(path, SWEEP_CSV_HEADER)]
