from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, fields
from enum import IntEnum
from typing import TYPE_CHECKING, Any, Callable, Sequence

import numpy as np

from .errors import ConfigError, InvalidObservationError
from .model_file import load_network, save_network
from .sim_env import Environment, EpisodeStats, Phase
from .tensor_nn import (OPTIMIZER_KIND_NAMES, Activation, LayerSpec, Network, OptimizerState, conv1d, dense,
                        embedding, huber_loss, lstm, make_optimizer, mse_loss, optimizer_step)

if TYPE_CHECKING:
    from typing import TypeAlias

logger = logging.getLogger(__name__)

NDArray: TypeAlias = 'np.ndarray[Any, Any]'

NULL_TOKEN = 0


class ValueNet(IntEnum):
    CONV1D = 0
    LSTM   = 1


class LossKind(IntEnum):
    MSE   = 0
    HUBER = 1


class EpsilonSchedule(IntEnum):
    PER_EPISODE = 0
    GLOBAL      = 1


VALUE_NET_NAMES: dict[ValueNet, str] = {
    ValueNet.CONV1D: "conv1d",
    ValueNet.LSTM:   "lstm",
}

LOSS_NAMES: dict[LossKind, str] = {
    LossKind.MSE:   "mse",
    LossKind.HUBER: "huber",
}

EPSILON_SCHEDULE_NAMES: dict[EpsilonSchedule, str] = {
    EpsilonSchedule.PER_EPISODE: "per-episode",
    EpsilonSchedule.GLOBAL:      "global",
}


def enum_from_name(names: dict[Any, str], value: Any, field_name: str) -> Any:
    if not isinstance(value, str):
        return value
    for key, name in names.items():
        if name == value:
            return key
    raise ConfigError(field_name, f"unknown value {value!r}, expected one of {sorted(names.values())}")


def check_positive(cfg: Any, names: Sequence[str]) -> None:
    for name in names:
        value = getattr(cfg, name)
        if not value > 0:
            raise ConfigError(name, f"must be positive, got {value}")


@dataclass
class DqnConfig:
    value_net: ValueNet = ValueNet.LSTM
    loss: LossKind = LossKind.HUBER
    gamma: float = 0.99
    replay_capacity: int = 10_000
    minibatch_size: int = 32
    eps_start: float = 0.9
    eps_end: float = 0.1
    history_length: int = 20
    embedding_dim: int = 16
    hidden_units: int = 64
    learning_rate: float = 1e-3
    use_target_network: bool = False
    epsilon_horizon: int = 50
    epsilon_schedule: EpsilonSchedule = EpsilonSchedule.PER_EPISODE
    epsilon_global_horizon: int = 50_000
    conv_kernel_width: int = 3
    target_update_interval: int = 1_000
    optimizer: str = "adam"
    huber_delta: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        self.value_net        = ValueNet(enum_from_name(VALUE_NET_NAMES, self.value_net, "value_net"))
        self.loss             = LossKind(enum_from_name(LOSS_NAMES, self.loss, "loss"))
        self.epsilon_schedule = EpsilonSchedule(enum_from_name(EPSILON_SCHEDULE_NAMES, self.epsilon_schedule, "epsilon_schedule"))

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma", f"must lie in [0, 1], got {self.gamma}")
        check_positive(self, ("replay_capacity", "minibatch_size", "history_length", "embedding_dim", "hidden_units",
                              "learning_rate", "epsilon_horizon", "epsilon_global_horizon", "conv_kernel_width",
                              "target_update_interval", "huber_delta"))
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ConfigError("eps_end", f"need 0 <= eps_end <= eps_start <= 1, got {self.eps_end} and {self.eps_start}")
        if self.minibatch_size > self.replay_capacity:
            raise ConfigError("minibatch_size", f"{self.minibatch_size} exceeds replay capacity {self.replay_capacity}")
        if self.value_net == ValueNet.CONV1D and self.conv_kernel_width > self.history_length:
            raise ConfigError("conv_kernel_width", f"{self.conv_kernel_width} exceeds history length {self.history_length}")
        if self.optimizer not in OPTIMIZER_KIND_NAMES.values():
            raise ConfigError("optimizer", f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["value_net"]        = VALUE_NET_NAMES[self.value_net]
        doc["loss"]             = LOSS_NAMES[self.loss]
        doc["epsilon_schedule"] = EPSILON_SCHEDULE_NAMES[self.epsilon_schedule]
        return doc

    @staticmethod
    def from_dict(doc: dict[str, Any]) -> DqnConfig:
        known = {f.name for f in fields(DqnConfig)}
        return DqnConfig(**{k: v for k, v in doc.items() if k in known})


@dataclass
class Transition:
    state: NDArray
    action: int
    reward: int
    next_state: NDArray
    terminal: bool


class ReplayMemory:
    """Fixed-capacity FIFO of transitions; once full each push evicts the oldest."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("replay_capacity", f"must be positive, got {capacity}")
        self.capacity = capacity
        self._buffer: list[Transition] = []
        self._next = 0
        self.inserted = 0

    def __len__(self) -> int:
        return len(self._buffer)

    def push(self, transition: Transition) -> None:
        if len(self._buffer) < self.capacity:
            self._buffer.append(transition)
        else:
            self._buffer[self._next] = transition
        self._next = (self._next + 1) % self.capacity
        self.inserted += 1

    def contents(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        if len(self._buffer) < self.capacity:
            return list(self._buffer)
        return self._buffer[self._next:] + self._buffer[:self._next]

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.integers(0, len(self._buffer), size = batch_size)
        return [self._buffer[i] for i in idx]


def encode_state(history: Sequence[int], history_length: int, num_items: int) -> NDArray:
    """Last `history_length` viewed items as a [L x 1] column of token ids.

    Item i becomes token i + 1; shorter histories are left-padded with the null token 0.
    """
    recent = list(history)[-history_length:] if history_length > 0 else []
    tokens = np.full((history_length, 1), NULL_TOKEN, dtype = np.float64)
    for pos, item in enumerate(recent, start = history_length - len(recent)):
        if not 0 <= item < num_items:
            raise InvalidObservationError(f"item id {item} out of range [0, {num_items})")
        tokens[pos, 0] = item + 1
    return tokens


def epsilon_at(bandit_step_index: int, horizon: int, eps_start: float = 0.9, eps_end: float = 0.1) -> float:
    frac = min(bandit_step_index / horizon, 1.0)
    eps = eps_start + (eps_end - eps_start) * frac
    return min(max(eps, eps_end), eps_start)


def select_action(q_network: Network, state: NDArray, epsilon: float, rng: np.random.Generator) -> int:
    if rng.random() < epsilon:
        return int(rng.integers(0, q_network.out_dim))
    return int(np.argmax(q_network.forward(state)))


def compute_targets(minibatch: Sequence[Transition], q_network: Network, gamma: float) -> NDArray:
    rewards  = np.array([t.reward for t in minibatch], dtype = np.float64)
    terminal = np.array([t.terminal for t in minibatch], dtype = bool)
    if gamma == 0.0 or terminal.all():
        return rewards
    next_q = q_network.forward(np.stack([t.next_state for t in minibatch]))
    bootstrap = np.where(terminal, 0.0, next_q.max(axis = 1))
    return rewards + gamma * bootstrap


def masked_output_gradient(q_values: NDArray, actions: NDArray, action_gradient: NDArray) -> NDArray:
    """Scatter the per-sample loss gradient onto the taken action's output unit."""
    upstream = np.zeros_like(q_values)
    upstream[np.arange(len(actions)), actions] = action_gradient
    return upstream


def build_q_network(config: DqnConfig, num_items: int, seed: int) -> Network:
    h = config.hidden_units
    specs: list[LayerSpec] = [embedding(num_items + 1, config.embedding_dim)]
    if config.value_net == ValueNet.CONV1D:
        specs.append(conv1d(config.embedding_dim, h, config.conv_kernel_width))
    else:
        specs.append(lstm(config.embedding_dim, h))
    specs += [dense(h, h, Activation.RELU), dense(h, num_items)]
    return Network(specs, seed)


class DqnAgent:
    config: DqnConfig
    num_items: int
    network: Network
    target_network: Network | None
    optimizer: OptimizerState
    replay: ReplayMemory
    rng: np.random.Generator

    def __init__(self, config: DqnConfig, num_items: int, network: Network | None = None,
                 rng: np.random.Generator | None = None):
        config.validate()
        self.config    = config
        self.num_items = num_items
        self.network   = network if network is not None else build_q_network(config, num_items, config.seed)
        if self.network.out_dim != num_items:
            raise ConfigError("num_items", f"network has {self.network.out_dim} outputs for {num_items} items")
        self.target_network = self.network.copy() if config.use_target_network else None
        self.optimizer = make_optimizer(config.optimizer, config.learning_rate, self.network)
        self.replay    = ReplayMemory(config.replay_capacity)
        self.rng       = rng if rng is not None else np.random.default_rng(config.seed)
        self.train_steps = 0
        self.total_bandit_steps = 0

    def loss_fn(self) -> Callable[[NDArray, NDArray], tuple[float, NDArray]]:
        if self.config.loss == LossKind.HUBER:
            delta = self.config.huber_delta
            return lambda p, t: huber_loss(p, t, delta)
        return mse_loss

    def epsilon(self, episode_bandit_step: int) -> float:
        cfg = self.config
        if cfg.epsilon_schedule == EpsilonSchedule.GLOBAL:
            return epsilon_at(self.total_bandit_steps, cfg.epsilon_global_horizon, cfg.eps_start, cfg.eps_end)
        return epsilon_at(episode_bandit_step, cfg.epsilon_horizon, cfg.eps_start, cfg.eps_end)

    def encode(self, history: Sequence[int]) -> NDArray:
        return encode_state(history, self.config.history_length, self.num_items)

    def save_checkpoint(self, path: os.PathLike[str] | str) -> None:
        save_network(self.network, path, {"agent": "dqn", "num_items": self.num_items, "config": self.config.to_dict()})

    @staticmethod
    def from_checkpoint(network: Network, metadata: dict[str, Any]) -> DqnAgent:
        return DqnAgent(DqnConfig.from_dict(metadata["config"]), int(metadata["num_items"]), network = network)

    @staticmethod
    def load_checkpoint(path: os.PathLike[str] | str) -> DqnAgent:
        network, metadata = load_network(path)
        return DqnAgent.from_checkpoint(network, metadata)


def train_step(agent: DqnAgent, rng: np.random.Generator | None = None) -> float | None:
    """One minibatch update. Returns None (skip) while the replay holds fewer than a minibatch."""
    cfg = agent.config
    if len(agent.replay) < cfg.minibatch_size:
        return None
    batch = agent.replay.sample(cfg.minibatch_size, rng if rng is not None else agent.rng)
    bootstrap_net = agent.target_network if agent.target_network is not None else agent.network
    targets = compute_targets(batch, bootstrap_net, cfg.gamma)

    actions = np.array([t.action for t in batch], dtype = np.int64)
    q = agent.network.forward(np.stack([t.state for t in batch]))
    taken = q[np.arange(len(batch)), actions]
    loss, grad = agent.loss_fn()(taken, targets)
    grads = agent.network.backward(masked_output_gradient(q, actions, grad))
    optimizer_step(agent.optimizer, agent.network, grads)

    agent.train_steps += 1
    if agent.target_network is not None and agent.train_steps % cfg.target_update_interval == 0:
        agent.target_network = agent.network.copy()
    return loss


def run_dqn_episode(agent: DqnAgent, env: Environment, train: bool = True) -> EpisodeStats:
    """Plays one episode. Each bandit decision becomes one transition whose next state is
    the history at the following decision (or at the end of the episode)."""
    if env.num_items != agent.num_items:
        raise ConfigError("num_items", f"agent has {agent.num_items} items, environment {env.num_items}")
    stats = EpisodeStats()
    pending: tuple[NDArray, int, int] | None = None
    result = env.reset()
    while not result.done:
        if result.phase != Phase.BANDIT:
            result = env.step(None)
            continue
        state = agent.encode(result.observation)
        if pending is not None and train:
            agent.replay.push(Transition(pending[0], pending[1], pending[2], state, False))
            train_step(agent)
        epsilon = agent.epsilon(stats.bandit_steps) if train else 0.0
        action = select_action(agent.network, state, epsilon, agent.rng)
        result = env.step(action)
        pending = (state, action, result.reward)
        stats.bandit_steps += 1
        stats.clicks += result.reward
        if train:
            agent.total_bandit_steps += 1

    if pending is not None and train:
        agent.replay.push(Transition(pending[0], pending[1], pending[2], agent.encode(result.observation), True))
        train_step(agent)
    logger.debug("dqn episode: %d bandit steps, %d clicks", stats.bandit_steps, stats.clicks)
    return stats
