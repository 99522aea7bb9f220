"""Desk-scale trend checks. Each takes minutes to tens of minutes; run them with `pytest -m slow`."""
import os

import pytest

from recobench.agent_dqn import DqnConfig
from recobench.bench_harness import ExperimentConfig, compare_ratio, final_score, run_experiment, run_single
from recobench.sim_env import EnvConfig

SEEDS = 5
CONCURRENCY = max(1, min(SEEDS, os.cpu_count() or 1))

# same values as presets/cnn-vs-lstm.yaml
DESK_DQN = DqnConfig(epsilon_schedule = "global", epsilon_global_horizon = 20_000, gamma = 0.9,
                     use_target_network = True, target_update_interval = 500)


def experiment(agent, users, items, episodes, **kw):
    return ExperimentConfig(agent = agent, env = EnvConfig(num_users = users, num_items = items),
                            episodes = episodes, runs = SEEDS, concurrency = CONCURRENCY, **kw)


@pytest.mark.slow
def test_dqn_lstm_beats_random():
    learned = run_experiment(experiment("dqn-lstm", 100, 100, 2_000, dqn = DESK_DQN))
    baseline = run_experiment(experiment("random", 100, 100, 2_000))
    assert final_score(learned)[0] >= 1.5 * final_score(baseline)[0]


@pytest.mark.slow
def test_huber_is_not_worse_than_mse():
    huber = run_experiment(experiment("dqn-lstm", 100, 1_000, 1_000, loss = "huber"))
    mse = run_experiment(experiment("dqn-lstm", 100, 1_000, 1_000, loss = "mse"))
    assert compare_ratio(huber, mse) >= 1.0


@pytest.mark.slow
def test_policy_gradient_is_steadier_than_dqn():
    pg = experiment("pg", 1_000, 1_000, 1_000)
    dqn = experiment("dqn-lstm", 1_000, 1_000, 1_000)
    steadier = 0
    for i in range(SEEDS):
        pg_std = final_score(run_single(pg, i).series.ctr)[1]
        dqn_std = final_score(run_single(dqn, i).series.ctr)[1]
        steadier += pg_std <= dqn_std
    assert steadier >= 4
