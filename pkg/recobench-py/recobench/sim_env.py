from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from enum import IntEnum
from typing import TYPE_CHECKING, Any

import numpy as np

from .errors import CalibrationError, ConfigError, InvalidActionError, ModelFileError, ProtocolError
from .model_file import SNAPSHOT_VERSION, read_json
from .tensor_nn import sigmoid, softmax_rows

if TYPE_CHECKING:
    from typing import TypeAlias

logger = logging.getLogger(__name__)

NDArray: TypeAlias = 'np.ndarray[Any, Any]'

CALIBRATION_LOW       = -20.0
CALIBRATION_HIGH      = 20.0
CALIBRATION_MAX_ITERS = 100
CALIBRATION_REL_TOL   = 0.10
MAX_TARGET_CTR        = 0.5


class Phase(IntEnum):
    ORGANIC  = 0
    BANDIT   = 1
    TERMINAL = 2


PHASE_NAMES: dict[Phase, str] = {
    Phase.ORGANIC:  "organic",
    Phase.BANDIT:   "bandit",
    Phase.TERMINAL: "terminal",
}


def _check_probability(name: str, value: float) -> None:
    if not 0.0 < value < 1.0:
        raise ConfigError(name, f"must lie in (0, 1), got {value}")


# closed at 0.5, the CTR of all-zero dot products at offset 0
def _check_target_ctr(value: float) -> None:
    if not 0.0 < value <= MAX_TARGET_CTR:
        raise ConfigError("target_random_ctr", f"must lie in (0, {MAX_TARGET_CTR}], got {value}")


@dataclass
class EnvConfig:
    num_users: int = 100
    num_items: int = 100
    num_features: int = 10
    organic_continue_prob: float = 0.8
    bandit_continue_prob: float = 0.8
    leave_prob: float = 0.1
    max_steps_per_episode: int = 500
    target_random_ctr: float = 0.01
    seed: int = 0
    click_scale: float = 4.0
    calibration_samples: int = 100_000

    def validate(self) -> None:
        for name in ("num_users", "num_items", "num_features", "max_steps_per_episode", "calibration_samples"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(name, f"must be a positive integer, got {value!r}")
        for name in ("organic_continue_prob", "bandit_continue_prob", "leave_prob"):
            _check_probability(name, getattr(self, name))
        _check_target_ctr(self.target_random_ctr)
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed", f"must be a 64-bit unsigned integer, got {self.seed}")
        if not (math.isfinite(self.click_scale) and self.click_scale > 0):
            raise ConfigError("click_scale", f"must be positive and finite, got {self.click_scale}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @staticmethod
    def from_dict(doc: dict[str, Any]) -> EnvConfig:
        known = {f.name for f in fields(EnvConfig)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown environment field")
        return EnvConfig(**doc)


@dataclass
class LatentModel:
    user_vectors: NDArray
    item_vectors: NDArray
    click_scale: float
    click_offset: float

    @property
    def num_users(self) -> int:
        return int(self.user_vectors.shape[0])

    @property
    def num_items(self) -> int:
        return int(self.item_vectors.shape[0])

    def dots(self, user_id: int) -> NDArray:
        return self.item_vectors @ self.user_vectors[user_id]

    @staticmethod
    def sample(config: EnvConfig, rng: np.random.Generator) -> LatentModel:
        scale = 1.0 / math.sqrt(config.num_features)
        users = rng.standard_normal((config.num_users, config.num_features)) * scale
        items = rng.standard_normal((config.num_items, config.num_features)) * scale
        return LatentModel(users, items, float(config.click_scale), 0.0)


@dataclass
class SessionState:
    user_id: int = 0
    phase: Phase = Phase.TERMINAL
    step_count: int = 0
    history: list[int] = field(default_factory = list)


@dataclass(frozen=True)
class StepResult:
    observation: tuple[int, ...]
    reward: int
    done: bool
    phase: Phase
    user_id: int
    step_count: int


def calibrate_offset(latent: LatentModel, click_scale: float, target_random_ctr: float,
                     rng: np.random.Generator, samples: int = 100_000) -> float:
    """Bisect the click offset b so that the mean of sigmoid(c * dot - b) over uniformly
    random (user, item) pairs hits target_random_ctr.

    When the full user x item grid is no larger than `samples` it is used exactly.
    """
    _check_target_ctr(target_random_ctr)
    n_u, n_i = latent.num_users, latent.num_items
    if n_u * n_i <= samples:
        dots = (latent.user_vectors @ latent.item_vectors.T).reshape(-1)
    else:
        users = rng.integers(0, n_u, size = samples)
        items = rng.integers(0, n_i, size = samples)
        dots  = np.einsum('ij,ij->i', latent.user_vectors[users], latent.item_vectors[items])
    scaled = click_scale * dots

    def mean_ctr(b: float) -> float:
        return float(np.mean(sigmoid(scaled - b)))

    lo, hi = CALIBRATION_LOW, CALIBRATION_HIGH
    if not mean_ctr(hi) <= target_random_ctr <= mean_ctr(lo):
        raise CalibrationError(f"target CTR {target_random_ctr} is not reachable with an offset in [{lo}, {hi}]")
    mid = 0.0
    for _ in range(CALIBRATION_MAX_ITERS):
        mid = 0.5 * (lo + hi)
        ctr = mean_ctr(mid)
        if ctr == target_random_ctr or hi - lo < 1e-12:
            break
        # mean click probability decreases in b
        if ctr > target_random_ctr:
            lo = mid
        else:
            hi = mid
    achieved = mean_ctr(mid)
    if abs(achieved - target_random_ctr) > CALIBRATION_REL_TOL * target_random_ctr:
        raise CalibrationError(f"bisection did not converge: offset {mid} gives CTR {achieved}, target {target_random_ctr}")
    return mid


class Environment:
    """Organic/bandit session simulator with a gym-like reset()/step() interface.

    A single instance is not thread safe; create one per worker.
    """

    config: EnvConfig
    latent: LatentModel
    rng: np.random.Generator

    def __init__(self, config: EnvConfig, latent: LatentModel, session_rng: np.random.Generator):
        config.validate()
        if latent.user_vectors.shape != (config.num_users, config.num_features):
            raise ConfigError("user_vectors", f"shape {latent.user_vectors.shape} does not match {config.num_users} x {config.num_features}")
        if latent.item_vectors.shape != (config.num_items, config.num_features):
            raise ConfigError("item_vectors", f"shape {latent.item_vectors.shape} does not match {config.num_items} x {config.num_features}")
        if not math.isfinite(latent.click_offset):
            raise ConfigError("click_offset", "must be finite")
        self.config  = config
        self.latent  = latent
        self.rng     = session_rng
        self._state  = SessionState()
        self._organic_cache: dict[int, NDArray] = {}
        self._started = False

    @staticmethod
    def _seed_sequences(seed: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
        model_seq, session_seq = np.random.SeedSequence(seed).spawn(2)
        return model_seq, session_seq

    @staticmethod
    def create(config: EnvConfig) -> Environment:
        config.validate()
        model_seq, session_seq = Environment._seed_sequences(config.seed)
        model_rng = np.random.default_rng(model_seq)
        latent = LatentModel.sample(config, model_rng)
        latent.click_offset = calibrate_offset(latent, config.click_scale, config.target_random_ctr,
                                               model_rng, config.calibration_samples)
        logger.info("environment %dx%d (seed %d): click offset %.6f", config.num_users, config.num_items,
                    config.seed, latent.click_offset)
        return Environment(config, latent, np.random.default_rng(session_seq))

    @staticmethod
    def from_latent(config: EnvConfig, latent: LatentModel) -> Environment:
        """Environment around a given latent model; no sampling and no calibration."""
        _, session_seq = Environment._seed_sequences(config.seed)
        return Environment(config, latent, np.random.default_rng(session_seq))

    @property
    def num_users(self) -> int:
        return self.config.num_users

    @property
    def num_items(self) -> int:
        return self.config.num_items

    @property
    def session(self) -> SessionState:
        s = self._state
        return SessionState(s.user_id, s.phase, s.step_count, list(s.history))

    def _result(self, reward: int) -> StepResult:
        s = self._state
        return StepResult(tuple(s.history), reward, s.phase == Phase.TERMINAL, s.phase, s.user_id, s.step_count)

    def _check_user(self, user_id: int) -> None:
        if not 0 <= user_id < self.num_users:
            raise InvalidActionError(f"user id {user_id} out of range [0, {self.num_users})")

    def organic_distribution(self, user_id: int) -> NDArray:
        self._check_user(user_id)
        probs = self._organic_cache.get(user_id)
        if probs is None:
            probs = softmax_rows(self.latent.dots(user_id))
            self._organic_cache[user_id] = probs
        return probs

    def sample_organic_item(self, user_id: int) -> int:
        return int(self.rng.choice(self.num_items, p = self.organic_distribution(user_id)))

    def click_probability(self, user_id: int, item_id: int) -> float:
        self._check_user(user_id)
        if not 0 <= item_id < self.num_items:
            raise InvalidActionError(f"item id {item_id} out of range [0, {self.num_items})")
        dot = float(self.latent.item_vectors[item_id] @ self.latent.user_vectors[user_id])
        return float(sigmoid(np.float64(self.latent.click_scale * dot - self.latent.click_offset)))

    def click_probabilities(self, user_id: int) -> NDArray:
        self._check_user(user_id)
        return sigmoid(self.latent.click_scale * self.latent.dots(user_id) - self.latent.click_offset)

    def oracle_best_action(self, user_id: int) -> tuple[int, float]:
        probs = self.click_probabilities(user_id)
        best = int(np.argmax(probs))
        return best, float(probs[best])

    def reset(self) -> StepResult:
        user = int(self.rng.integers(0, self.num_users))
        self._state = SessionState(user_id = user, phase = Phase.ORGANIC, step_count = 0, history = [])
        self._state.history.append(self.sample_organic_item(user))
        self._started = True
        return self._result(0)

    def step(self, action: int | None = None) -> StepResult:
        s = self._state
        if not self._started or s.phase == Phase.TERMINAL:
            raise ProtocolError("step() called on a closed episode; call reset() first")

        reward = 0
        cfg = self.config
        if s.phase == Phase.ORGANIC:
            if action is not None:
                raise ProtocolError(f"no action may be given during an organic session, got {action!r}")
            s.history.append(self.sample_organic_item(s.user_id))
            if self.rng.random() >= cfg.organic_continue_prob:
                s.phase = Phase.BANDIT
        else:
            if action is None:
                raise ProtocolError("an action is required during a bandit session")
            if isinstance(action, bool) or not isinstance(action, (int, np.integer)):
                raise InvalidActionError(f"action must be an item index, got {action!r}")
            p = self.click_probability(s.user_id, int(action))
            if self.rng.random() < p:
                reward = 1
                s.phase = Phase.ORGANIC
            elif self.rng.random() >= cfg.bandit_continue_prob:
                s.phase = Phase.TERMINAL if self.rng.random() < cfg.leave_prob else Phase.ORGANIC

        s.step_count += 1
        if s.step_count >= cfg.max_steps_per_episode:
            s.phase = Phase.TERMINAL
        return self._result(reward)

    def snapshot(self) -> dict[str, Any]:
        return {
            "version":      SNAPSHOT_VERSION,
            "config":       self.config.to_dict(),
            "user_vectors": self.latent.user_vectors.tolist(),
            "item_vectors": self.latent.item_vectors.tolist(),
            "click_scale":  self.latent.click_scale,
            "click_offset": self.latent.click_offset,
        }

    @staticmethod
    def from_snapshot(doc: dict[str, Any]) -> Environment:
        if doc.get("version") != SNAPSHOT_VERSION:
            raise ModelFileError(f"unsupported environment snapshot version {doc.get('version')!r}")
        try:
            config = EnvConfig.from_dict(doc["config"])
            latent = LatentModel(
                user_vectors = np.asarray(doc["user_vectors"], dtype = np.float64).reshape(config.num_users, config.num_features),
                item_vectors = np.asarray(doc["item_vectors"], dtype = np.float64).reshape(config.num_items, config.num_features),
                click_scale  = float(doc["click_scale"]),
                click_offset = float(doc["click_offset"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ModelFileError(f"malformed environment snapshot: {e}") from e
        return Environment.from_latent(config, latent)


def create_env(config: EnvConfig) -> Environment:
    return Environment.create(config)


def save_snapshot(env: Environment, path: os.PathLike[str] | str) -> None:
    with open(path, "w") as fout:
        json.dump(env.snapshot(), fout)
        fout.write("\n")


def load_snapshot(path: os.PathLike[str] | str) -> Environment:
    return Environment.from_snapshot(read_json(path))


def random_policy_ctr(env: Environment, bandit_steps: int, rng: np.random.Generator) -> float:
    """Click-through rate of uniformly random recommendations over `bandit_steps` decisions."""
    clicks = 0
    done_steps = 0
    result = env.reset()
    while done_steps < bandit_steps:
        if result.done:
            result = env.reset()
            continue
        if result.phase == Phase.BANDIT:
            result = env.step(int(rng.integers(0, env.num_items)))
            clicks += result.reward
            done_steps += 1
        else:
            result = env.step(None)
    return clicks / bandit_steps


@dataclass
class EpisodeStats:
    bandit_steps: int = 0
    clicks: int = 0

    @property
    def ctr(self) -> float:
        return self.clicks / self.bandit_steps if self.bandit_steps else 0.0
