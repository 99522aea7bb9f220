from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import TYPE_CHECKING, Any, Sequence

import numpy as np

from .agent_dqn import check_positive, encode_state
from .errors import ConfigError
from .model_file import load_network, save_network
from .sim_env import Environment, EpisodeStats, Phase
from .tensor_nn import (OPTIMIZER_KIND_NAMES, Activation, LayerKind, Network, OptimizerState, cross_entropy_loss,
                        dense, embedding, lstm, make_optimizer, optimizer_step, softmax)

if TYPE_CHECKING:
    from typing import TypeAlias

logger = logging.getLogger(__name__)

NDArray: TypeAlias = 'np.ndarray[Any, Any]'

RETURN_NORM_EPS = 1e-8


@dataclass
class PgConfig:
    gamma: float = 0.99
    history_length: int = 20
    embedding_dim: int = 16
    lstm_units: int = 64
    dense_units: int = 64
    learning_rate: float = 1e-3
    normalize_returns: bool = True
    episodes_per_update: int = 1
    optimizer: str = "adam"
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma", f"must lie in [0, 1], got {self.gamma}")
        check_positive(self, ("history_length", "embedding_dim", "lstm_units", "dense_units", "learning_rate",
                              "episodes_per_update"))
        if self.optimizer not in OPTIMIZER_KIND_NAMES.values():
            raise ConfigError("optimizer", f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @staticmethod
    def from_dict(doc: dict[str, Any]) -> PgConfig:
        known = {f.name for f in fields(PgConfig)}
        return PgConfig(**{k: v for k, v in doc.items() if k in known})


@dataclass
class TrajectoryStep:
    state: NDArray
    action: int
    reward: int
    action_probability: float


@dataclass
class Trajectory:
    steps: list[TrajectoryStep] = field(default_factory = list)
    returns: NDArray | None = None

    @property
    def rewards(self) -> list[int]:
        return [s.reward for s in self.steps]


def action_distribution(policy_network: Network, state: NDArray) -> NDArray:
    if policy_network.specs[-1].kind != LayerKind.SOFTMAX:
        raise ConfigError("layers", "a policy network must end in a softmax layer")
    return policy_network.forward(state)


def sample_action(distribution: NDArray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(distribution)
    cdf /= cdf[-1]
    idx = int(np.searchsorted(cdf, rng.random(), side = 'right'))
    return min(idx, len(cdf) - 1)


def discounted_returns(rewards: Sequence[float], gamma: float) -> NDArray:
    returns = np.zeros(len(rewards), dtype = np.float64)
    running = 0.0
    for t in reversed(range(len(rewards))):
        running = rewards[t] + gamma * running
        returns[t] = running
    return returns


def policy_objective(probabilities: NDArray, actions: Sequence[int], weights: NDArray) -> tuple[float, NDArray]:
    """Sum of return-weighted cross entropies and its gradient w.r.t. the softmax logits."""
    total = 0.0
    grad = np.zeros_like(probabilities)
    for i, (action, weight) in enumerate(zip(actions, weights)):
        loss, g = cross_entropy_loss(probabilities[i], int(action), float(weight))
        total += loss
        grad[i] = g
    return total, grad


def build_policy_network(config: PgConfig, num_items: int, seed: int) -> Network:
    return Network([
        embedding(num_items + 1, config.embedding_dim),
        lstm(config.embedding_dim, config.lstm_units),
        dense(config.lstm_units, config.dense_units, Activation.RELU),
        dense(config.dense_units, num_items),
        softmax(num_items),
    ], seed)


class PgAgent:
    config: PgConfig
    num_items: int
    network: Network
    optimizer: OptimizerState
    rng: np.random.Generator
    pending: list[Trajectory]

    def __init__(self, config: PgConfig, num_items: int, network: Network | None = None,
                 rng: np.random.Generator | None = None):
        config.validate()
        self.config    = config
        self.num_items = num_items
        self.network   = network if network is not None else build_policy_network(config, num_items, config.seed)
        if self.network.out_dim != num_items:
            raise ConfigError("num_items", f"network has {self.network.out_dim} outputs for {num_items} items")
        self.optimizer = make_optimizer(config.optimizer, config.learning_rate, self.network)
        self.rng       = rng if rng is not None else np.random.default_rng(config.seed)
        self.pending   = []

    def encode(self, history: Sequence[int]) -> NDArray:
        return encode_state(history, self.config.history_length, self.num_items)

    def save_checkpoint(self, path: os.PathLike[str] | str) -> None:
        save_network(self.network, path, {"agent": "pg", "num_items": self.num_items, "config": self.config.to_dict()})

    @staticmethod
    def from_checkpoint(network: Network, metadata: dict[str, Any]) -> PgAgent:
        return PgAgent(PgConfig.from_dict(metadata["config"]), int(metadata["num_items"]), network = network)

    @staticmethod
    def load_checkpoint(path: os.PathLike[str] | str) -> PgAgent:
        network, metadata = load_network(path)
        return PgAgent.from_checkpoint(network, metadata)


def policy_update(agent: PgAgent, trajectories: Sequence[Trajectory]) -> float | None:
    """One REINFORCE step over all steps of `trajectories`. Returns None when there is nothing to learn from."""
    steps = [s for traj in trajectories for s in traj.steps]
    if not steps:
        return None
    cfg = agent.config
    for traj in trajectories:
        traj.returns = discounted_returns(traj.rewards, cfg.gamma)
    weights = np.concatenate([traj.returns for traj in trajectories if traj.returns is not None])
    if cfg.normalize_returns:
        weights = (weights - weights.mean()) / (weights.std() + RETURN_NORM_EPS)

    probs = agent.network.forward(np.stack([s.state for s in steps]))
    loss, grad = policy_objective(probs, [s.action for s in steps], weights)
    grads = agent.network.backward(grad, logits_gradient = True)
    optimizer_step(agent.optimizer, agent.network, grads)
    return loss


def run_pg_episode(agent: PgAgent, env: Environment, train: bool = True) -> EpisodeStats:
    if env.num_items != agent.num_items:
        raise ConfigError("num_items", f"agent has {agent.num_items} items, environment {env.num_items}")
    stats = EpisodeStats()
    trajectory = Trajectory()
    result = env.reset()
    while not result.done:
        if result.phase != Phase.BANDIT:
            result = env.step(None)
            continue
        state = agent.encode(result.observation)
        dist = action_distribution(agent.network, state)
        action = sample_action(dist, agent.rng)
        result = env.step(action)
        trajectory.steps.append(TrajectoryStep(state, action, result.reward, float(dist[action])))
        stats.bandit_steps += 1
        stats.clicks += result.reward

    if train:
        agent.pending.append(trajectory)
        if len(agent.pending) >= agent.config.episodes_per_update:
            policy_update(agent, agent.pending)
            agent.pending = []
    logger.debug("pg episode: %d bandit steps, %d clicks", stats.bandit_steps, stats.clicks)
    return stats
