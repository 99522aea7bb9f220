import numpy as np
import pytest

from recobench.agent_dqn import (DqnAgent, DqnConfig, EpsilonSchedule, LossKind, ReplayMemory, Transition, ValueNet,
                                 build_q_network, compute_targets, encode_state, epsilon_at, masked_output_gradient,
                                 run_dqn_episode, select_action, train_step)
from recobench.errors import ConfigError, InvalidObservationError
from recobench.sim_env import EnvConfig, Environment, create_env
from recobench.tensor_nn import Network, dense


def tiny_config(**kw):
    base = dict(history_length = 4, embedding_dim = 3, hidden_units = 5, minibatch_size = 4, replay_capacity = 50)
    base.update(kw)
    return DqnConfig(**base)


def transition(action = 0, reward = 0, terminal = False, state = None, next_state = None):
    state = np.zeros((4, 1)) if state is None else state
    next_state = np.zeros((4, 1)) if next_state is None else next_state
    return Transition(state, action, reward, next_state, terminal)


def test_encode_empty_history_is_all_null():
    np.testing.assert_array_equal(encode_state([], 5, 10), np.zeros((5, 1)))


def test_encode_keeps_last_items_left_padded():
    np.testing.assert_array_equal(encode_state([3, 7], 4, 10)[:, 0], [0, 0, 4, 8])
    long = list(range(9)) + [1, 2, 3, 4, 5]
    np.testing.assert_array_equal(encode_state(long, 9, 10)[:, 0], np.array(long[-9:]) + 1)
    np.testing.assert_array_equal(encode_state(long, 9, 10), encode_state(long, 9, 10))


def test_encode_rejects_unknown_item():
    with pytest.raises(InvalidObservationError):
        encode_state([1, 10], 4, 10)


def test_epsilon_schedule_examples():
    assert epsilon_at(0, 50) == pytest.approx(0.9)
    assert epsilon_at(50, 50) == pytest.approx(0.1)
    assert epsilon_at(500, 50) == pytest.approx(0.1)
    assert epsilon_at(25, 50) == pytest.approx(0.5)


def test_epsilon_bounds_randomized():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        horizon = int(rng.integers(1, 500))
        step = int(rng.integers(0, 2000))
        assert 0.1 <= epsilon_at(step, horizon) <= 0.9


def test_global_schedule_spans_episodes():
    agent = DqnAgent(tiny_config(epsilon_schedule = "global", epsilon_global_horizon = 100), 5)
    assert agent.config.epsilon_schedule == EpsilonSchedule.GLOBAL
    agent.total_bandit_steps = 50
    assert agent.epsilon(0) == pytest.approx(0.5)
    per_episode = DqnAgent(tiny_config(), 5)
    per_episode.total_bandit_steps = 50
    assert per_episode.epsilon(0) == pytest.approx(0.9)


def test_replay_fifo_eviction_randomized():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        capacity = int(rng.integers(1, 20))
        inserts = int(rng.integers(0, 60))
        memory = ReplayMemory(capacity)
        for i in range(inserts):
            memory.push(transition(action = i))
        kept = [t.action for t in memory.contents()]
        assert len(memory) == min(inserts, capacity)
        assert kept == list(range(max(0, inserts - capacity), inserts))


def biased_network(favored, num_items = 10):
    net = Network([dense(4, num_items)], seed = 0)
    b = np.zeros(num_items)
    b[favored] = 1.0
    net.set_parameters([np.zeros((4, num_items)), b])
    return net


def test_select_action_uniform_at_full_exploration():
    net = biased_network(3)
    rng = np.random.default_rng(0)
    counts = np.bincount([select_action(net, np.zeros((4, 1)), 1.0, rng) for _ in range(10_000)], minlength = 10)
    chi2 = ((counts - 1000.0) ** 2 / 1000.0).sum()
    # 99th percentile of chi-square with 9 degrees of freedom
    assert chi2 < 21.67


def test_select_action_greedy_and_ties():
    rng = np.random.default_rng(0)
    assert all(select_action(biased_network(3), np.zeros((4, 1)), 0.0, rng) == 3 for _ in range(20))
    net = Network([dense(4, 6)], seed = 0)
    b = np.zeros(6)
    b[[2, 5]] = 1.0
    net.set_parameters([np.zeros((4, 6)), b])
    assert select_action(net, np.zeros((4, 1)), 0.0, rng) == 2


def test_targets_examples():
    net = biased_network(1, num_items = 3)
    assert compute_targets([transition(reward = 1, terminal = True)], net, 0.99)[0] == 1.0
    net.set_parameters([np.zeros((4, 3)), np.array([0.5, 2.0, -1.0])])
    assert compute_targets([transition(reward = 0)], net, 0.99)[0] == pytest.approx(1.98)
    rewards = [0, 1, 1, 0]
    batch = [transition(reward = r) for r in rewards]
    np.testing.assert_array_equal(compute_targets(batch, net, 0.0), rewards)
    batch = [transition(reward = r, terminal = True) for r in rewards]
    np.testing.assert_array_equal(compute_targets(batch, net, 0.99), rewards)


def test_masked_gradient_only_touches_taken_actions():
    rng = np.random.default_rng(2)
    q = rng.normal(size = (6, 4))
    actions = np.full(6, 2)
    upstream = masked_output_gradient(q, actions, rng.normal(size = 6))
    assert np.all(upstream[:, [0, 1, 3]] == 0.0)
    assert np.all(upstream[:, 2] != 0.0)


def test_train_step_skips_until_replay_has_a_minibatch():
    agent = DqnAgent(tiny_config(), 5)
    for _ in range(3):
        agent.replay.push(transition(action = 1, reward = 1, terminal = True))
    assert train_step(agent) is None
    agent.replay.push(transition(action = 1, reward = 1, terminal = True))
    before = [p.copy() for p in agent.network.parameters()]
    assert train_step(agent) is not None
    assert any(not np.array_equal(a, b) for a, b in zip(before, agent.network.parameters()))


@pytest.mark.parametrize("loss", ["mse", "huber"])
def test_single_transition_regression_to_target(loss):
    agent = DqnAgent(tiny_config(loss = loss, learning_rate = 1e-2, minibatch_size = 1), 5)
    state = encode_state([1, 3], 4, 5)
    agent.replay.push(Transition(state, 2, 1, state, True))
    for _ in range(5000):
        train_step(agent)
    assert agent.network.forward(state)[2] == pytest.approx(1.0, abs = 0.01)


def test_target_network_is_synced_periodically():
    agent = DqnAgent(tiny_config(use_target_network = True, target_update_interval = 3), 5)
    for _ in range(4):
        agent.replay.push(transition(action = 0, reward = 1))
    frozen = [p.copy() for p in agent.target_network.parameters()]
    train_step(agent)
    train_step(agent)
    for a, b in zip(frozen, agent.target_network.parameters()):
        np.testing.assert_array_equal(a, b)
    train_step(agent)
    for a, b in zip(agent.network.parameters(), agent.target_network.parameters()):
        np.testing.assert_array_equal(a, b)


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(minibatch_size = 100).validate()
    with pytest.raises(ConfigError):
        tiny_config(eps_start = 0.1, eps_end = 0.9).validate()
    with pytest.raises(ConfigError):
        tiny_config(gamma = 1.5).validate()
    with pytest.raises(ConfigError):
        DqnConfig(value_net = "gru")


def test_config_dict_round_trip():
    cfg = tiny_config(value_net = ValueNet.CONV1D, loss = LossKind.MSE, use_target_network = True)
    assert DqnConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("value_net", ["conv1d", "lstm"])
def test_q_network_shapes(value_net):
    cfg = tiny_config(value_net = value_net)
    net = build_q_network(cfg, 7, seed = 0)
    assert net.forward(encode_state([1, 2, 3], 4, 7)).shape == (7,)
    assert net.specs[0].in_dim == 8


def episode_env(**kw):
    return create_env(EnvConfig(num_users = 10, num_items = 5, seed = 3, max_steps_per_episode = 80, **kw))


def test_episode_counts_and_transitions():
    env = episode_env()
    agent = DqnAgent(tiny_config(), 5)
    for _ in range(5):
        stats = run_dqn_episode(agent, env)
        assert 0 <= stats.clicks <= stats.bandit_steps
        assert stats.ctr == (stats.clicks / stats.bandit_steps if stats.bandit_steps else 0.0)
    contents = agent.replay.contents()
    assert len(contents) == min(agent.replay.inserted, agent.replay.capacity)
    assert sum(t.terminal for t in contents) <= 5


def test_evaluation_episode_leaves_agent_untouched():
    env = episode_env()
    agent = DqnAgent(tiny_config(), 5)
    run_dqn_episode(agent, env)
    before = [p.copy() for p in agent.network.parameters()]
    stored = agent.replay.inserted
    for _ in range(3):
        run_dqn_episode(agent, env, train = False)
    assert agent.replay.inserted == stored
    for a, b in zip(before, agent.network.parameters()):
        assert a.tobytes() == b.tobytes()


def test_episode_determinism():
    def ctrs():
        env = episode_env()
        agent = DqnAgent(tiny_config(seed = 4), 5, rng = np.random.default_rng(9))
        return [run_dqn_episode(agent, env).ctr for _ in range(5)]
    assert ctrs() == ctrs()


def test_item_count_mismatch():
    with pytest.raises(ConfigError):
        run_dqn_episode(DqnAgent(tiny_config(), 4), episode_env())


#
# tabular oracle: 4 states, 3 actions, deterministic episodic dynamics
#

GAMMA = 0.9
# NEXT[s][a] is the next state, or None when the episode ends
NEXT = [
    [1, 2, None],
    [3, 0, None],
    [3, 1, None],
    [None, None, None],
]
REWARD = [
    [0, 0, 0],
    [0, 0, 1],
    [1, 0, 0],
    [0, 1, 0],
]


def value_iteration():
    q = np.zeros((4, 3))
    while True:
        new = np.zeros_like(q)
        for s in range(4):
            for a in range(3):
                nxt = NEXT[s][a]
                new[s, a] = REWARD[s][a] + (GAMMA * q[nxt].max() if nxt is not None else 0.0)
        if np.abs(new - q).max() < 1e-12:
            return new
        q = new


def one_hot(s):
    x = np.zeros((1, 4))
    x[0, s] = 1.0
    return x


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_tabular_dqn_matches_value_iteration(seed):
    q_star = value_iteration()
    net = Network([dense(4, 3)], seed = seed)
    cfg = DqnConfig(gamma = GAMMA, loss = "mse", optimizer = "sgd", learning_rate = 0.5,
                    minibatch_size = 12, replay_capacity = 12, seed = seed)
    agent = DqnAgent(cfg, 3, network = net, rng = np.random.default_rng(seed))
    for s in range(4):
        for a in range(3):
            nxt = NEXT[s][a]
            agent.replay.push(Transition(one_hot(s), a, REWARD[s][a], one_hot(nxt if nxt is not None else 0), nxt is None))
    for _ in range(50_000):
        train_step(agent)
        learned = np.array([net.forward(one_hot(s)) for s in range(4)])
        if np.abs(learned - q_star).max() <= 0.05:
            break
    learned = np.array([net.forward(one_hot(s)) for s in range(4)])
    assert np.abs(learned - q_star).max() <= 0.05
