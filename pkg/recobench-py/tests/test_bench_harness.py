import math

import numpy as np
import pytest

from recobench.agent_dqn import DqnConfig
from recobench.agent_pg import PgAgent, PgConfig
from recobench.bench_harness import (AGGREGATE_CSV_HEADER, COMPARE_CSV_HEADER, RUN_CSV_HEADER, SWEEP_CSV_HEADER,
                                     AgentKind, AggregateSeries, CTRSeries, ExperimentConfig, aggregate,
                                     bounded_parallel_map, check_scale, compare_ratio, compare_results, evaluate,
                                     export_comparison, export_csv, final_score, load_agent, moving_average,
                                     read_aggregate_csv, read_run_csv, read_sweep_csv, run_experiment, run_seeds,
                                     run_single, run_sweep)
from recobench.errors import ConfigError, RunError
from recobench.sim_env import EnvConfig, create_env


def small_experiment(tmp_path = None, **kw):
    base = dict(
        agent       = "random",
        env         = EnvConfig(num_users = 10, num_items = 5, max_steps_per_episode = 60),
        episodes    = 4,
        runs        = 2,
        seed_base   = 7,
        dqn         = DqnConfig(history_length = 4, embedding_dim = 3, hidden_units = 5, minibatch_size = 4,
                                replay_capacity = 50, conv_kernel_width = 2),
        pg          = PgConfig(history_length = 4, embedding_dim = 3, lstm_units = 4, dense_units = 4),
        output_dir  = str(tmp_path) if tmp_path is not None else None,
    )
    base.update(kw)
    return ExperimentConfig(**base)


def series(values):
    values = np.asarray(values, dtype = np.float64)
    return AggregateSeries(values, np.zeros_like(values), 1)


def test_moving_average_prefix_and_window():
    np.testing.assert_allclose(moving_average(np.array([1.0, 2.0, 3.0, 4.0]), window = 2), [1.0, 1.5, 2.5, 3.5])
    np.testing.assert_allclose(moving_average(np.full(120, 0.3)), 0.3)


def test_final_score_examples():
    assert final_score(np.full(200, 0.05)) == (pytest.approx(0.05), pytest.approx(0.0))
    # 100 episodes score the last 10
    values = np.concatenate([np.zeros(90), np.full(10, 0.2)])
    assert final_score(values)[0] == pytest.approx(0.2)
    ramp = np.arange(1, 201) / 200
    assert final_score(ramp)[0] == pytest.approx(ramp[-20:].mean())
    assert final_score(np.array([0.1, 0.3]))[0] == pytest.approx(0.2)
    with pytest.raises(ConfigError):
        final_score(np.array([]))


def test_compare_ratio():
    a = series(np.full(50, 0.02))
    assert compare_ratio(a, a) == pytest.approx(1.0)
    assert compare_ratio(series(np.full(50, 0.04)), a) == pytest.approx(2.0)
    assert compare_ratio(a, series(np.zeros(50))) == math.inf
    assert math.isnan(compare_ratio(series(np.zeros(50)), series(np.zeros(50))))
    with pytest.raises(ConfigError):
        compare_ratio(a, series(np.full(40, 0.02)))


@pytest.mark.parametrize("concurrency", [1, 2, 3, 10])
def test_bounded_parallel_map_keeps_input_order(concurrency):
    got = list(bounded_parallel_map(math.factorial, (n for n in range(12)), concurrency))
    assert got == [math.factorial(n) for n in range(12)]
    assert list(bounded_parallel_map(math.factorial, [], concurrency)) == []


def test_compare_results_reads_written_experiments(tmp_path):
    export_csv(series(np.full(20, 0.02)), tmp_path / "huber.csv")
    (tmp_path / "mse").mkdir()
    export_csv(series(np.full(20, 0.01)), tmp_path / "mse" / "aggregate.csv")
    comparison = compare_results(tmp_path / "huber.csv", tmp_path / "mse")
    assert comparison.ratio == pytest.approx(2.0)
    assert comparison.reference == str(tmp_path / "mse" / "aggregate.csv")
    export_comparison(comparison, tmp_path / "ratios.csv")
    export_comparison(comparison, tmp_path / "ratios.csv")
    lines = (tmp_path / "ratios.csv").read_text().splitlines()
    assert lines[0] == ",".join(COMPARE_CSV_HEADER)
    score, reference_score, ratio = (float(v) for v in lines[1].split(",")[2:])
    assert (score, reference_score, ratio) == (pytest.approx(0.02), pytest.approx(0.01), pytest.approx(2.0))
    assert len(lines) == 3


def test_aggregate_single_run_has_zero_std():
    s = CTRSeries(3, np.array([0.1, 0.0, 0.5]), np.array([10, 0, 2]), np.array([1, 0, 1]))
    agg = aggregate([s])
    np.testing.assert_array_equal(agg.mean, s.ctr)
    np.testing.assert_array_equal(agg.std, np.zeros(3))
    assert agg.n_runs == 1
    with pytest.raises(ConfigError):
        aggregate([])
    with pytest.raises(ConfigError):
        aggregate([s, CTRSeries(4, np.zeros(2), np.zeros(2), np.zeros(2))])


def test_run_seeds_are_independent_and_repeatable():
    env_a, init_a, rng_a = run_seeds(5)
    env_b, init_b, rng_b = run_seeds(5)
    assert (env_a, init_a) == (env_b, init_b)
    assert env_a != init_a
    assert rng_a.random() == rng_b.random()
    assert run_seeds(6)[0] != env_a


def test_experiment_writes_result_files(tmp_path):
    config = small_experiment(tmp_path)
    agg = run_experiment(config)
    assert len(agg) == 4 and agg.n_runs == 2
    for seed in (7, 8):
        path = tmp_path / f"run-{seed}.csv"
        assert path.read_text().splitlines()[0] == ",".join(RUN_CSV_HEADER)
        run = read_run_csv(path)
        assert run.seed == seed
        assert len(run) == 4
        np.testing.assert_array_equal(run.ctr, np.where(run.bandit_steps > 0, run.clicks / np.maximum(run.bandit_steps, 1), 0.0))
    assert (tmp_path / "aggregate.csv").read_text().splitlines()[0] == ",".join(AGGREGATE_CSV_HEADER)
    assert (tmp_path / "config.json").exists()
    assert not (tmp_path / "model.json").exists()


def test_aggregate_csv_matches_run_files(tmp_path):
    run_experiment(small_experiment(tmp_path, runs = 3))
    runs = [read_run_csv(tmp_path / f"run-{seed}.csv") for seed in (7, 8, 9)]
    stored = read_aggregate_csv(tmp_path / "aggregate.csv")
    recomputed = aggregate(runs)
    assert stored.n_runs == 3
    np.testing.assert_allclose(stored.mean, recomputed.mean, rtol = 0, atol = 1e-12)
    np.testing.assert_allclose(stored.std, recomputed.std, rtol = 0, atol = 1e-12)


def csv_bytes(out):
    return {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}


@pytest.mark.parametrize("agent", ["dqn-cnn", "pg"])
def test_experiment_is_deterministic(tmp_path, agent):
    run_experiment(small_experiment(tmp_path / "a", agent = agent))
    run_experiment(small_experiment(tmp_path / "b", agent = agent))
    assert csv_bytes(tmp_path / "a") == csv_bytes(tmp_path / "b")


def test_concurrency_does_not_change_results(tmp_path):
    run_experiment(small_experiment(tmp_path / "serial", agent = "dqn-lstm", runs = 3))
    run_experiment(small_experiment(tmp_path / "pool", agent = "dqn-lstm", runs = 3, concurrency = 2))
    assert csv_bytes(tmp_path / "serial") == csv_bytes(tmp_path / "pool")


def test_random_agent_matches_calibrated_ctr():
    config = small_experiment(env = EnvConfig(num_users = 100, num_items = 100), episodes = 100, runs = 3)
    results = [run_single(config, i).series for i in range(config.runs)]
    clicks = sum(int(s.clicks.sum()) for s in results)
    steps = sum(int(s.bandit_steps.sum()) for s in results)
    assert abs(clicks / steps - 0.01) <= 0.005


def test_failing_run_reports_its_seed():
    config = small_experiment(env = EnvConfig(num_users = 10, num_items = 5, target_random_ctr = 1e-12))
    with pytest.raises(RunError) as e:
        run_single(config, 1)
    assert e.value.seed == 8


def test_sweep_grid_and_csv(tmp_path):
    base = small_experiment(tmp_path, episodes = 2, runs = 1)
    grid = run_sweep(["random", "dqn-cnn"], [10, 20], [5, 10], episodes = 2, runs = 1, base = base)
    assert len(grid.rows) == 8
    assert not grid.failures
    assert {(r.users, r.items, r.agent) for r in grid.rows} == {
        (u, i, a) for u in (10, 20) for i in (5, 10) for a in ("random", "dqn-cnn")}
    assert (tmp_path / "sweep.csv").read_text().splitlines()[0] == ",".join(SWEEP_CSV_HEADER)
    rows = read_sweep_csv(tmp_path / "sweep.csv")
    assert [(r.users, r.items, r.agent) for r in rows] == [(r.users, r.items, r.agent) for r in grid.rows]
    assert rows[0].score_mean == grid.rows[0].score_mean
    assert (tmp_path / "users-20-items-10-dqn-cnn" / "aggregate.csv").exists()


def test_sweep_records_failing_cells():
    base = small_experiment(env = EnvConfig(num_users = 10, num_items = 5, target_random_ctr = 1e-12))
    grid = run_sweep(["random"], [10, 20], [5], episodes = 2, runs = 1, base = base)
    assert grid.rows == []
    assert [(u, i, a) for u, i, a, _ in grid.failures] == [(10, 5, "random"), (20, 5, "random")]


def test_sweep_axis_validation():
    with pytest.raises(ConfigError):
        run_sweep(["random"], [10, 5], [5], episodes = 1, runs = 1)
    with pytest.raises(ConfigError):
        run_sweep(["random"], [], [5], episodes = 1, runs = 1)
    with pytest.raises(ConfigError):
        run_sweep(["bogus"], [10], [5], episodes = 1, runs = 1)


def test_full_scale_guard():
    with pytest.raises(ConfigError) as e:
        check_scale(1_001, 100, full_scale = False)
    assert e.value.field == "full_scale"
    check_scale(1_000, 1_000, full_scale = False)
    check_scale(10_000, 100, full_scale = True)
    with pytest.raises(ConfigError):
        small_experiment(env = EnvConfig(num_users = 10, num_items = 2_000)).validate()


def test_experiment_config_validation():
    with pytest.raises(ConfigError):
        small_experiment(episodes = 0).validate()
    with pytest.raises(ConfigError):
        small_experiment(runs = 0).validate()
    with pytest.raises(ConfigError):
        small_experiment(agent = "dqn-gru")
    config = small_experiment(agent = "dqn-cnn", loss = "mse")
    assert config.agent == AgentKind.DQN_CNN
    doc = config.to_dict()
    assert doc["agent"] == "dqn-cnn"
    assert doc["dqn"]["value_net"] == "conv1d"
    assert doc["dqn"]["loss"] == "mse"


def test_saved_model_can_be_evaluated(tmp_path):
    run_experiment(small_experiment(tmp_path, agent = "pg", save_model = True))
    agent = load_agent(tmp_path / "model.json", np.random.default_rng(0))
    assert isinstance(agent, PgAgent)
    before = [p.copy() for p in agent.network.parameters()]
    env = create_env(EnvConfig(num_users = 10, num_items = 5, max_steps_per_episode = 60, seed = 2))
    result = evaluate(agent, env, 3)
    assert len(result) == 3
    for a, b in zip(before, agent.network.parameters()):
        assert a.tobytes() == b.tobytes()


def test_load_agent_rejects_plain_networks(tmp_path):
    from recobench.model_file import save_network
    from recobench.tensor_nn import Network, dense
    save_network(Network([dense(2, 2)]), tmp_path / "m.json")
    with pytest.raises(ConfigError):
        load_agent(tmp_path / "m.json")


def test_export_run_csv_formats_floats(tmp_path):
    s = CTRSeries(0, np.array([1 / 3]), np.array([3]), np.array([1]))
    export_csv(s, tmp_path / "run-0.csv")
    line = (tmp_path / "run-0.csv").read_text().splitlines()[1]
    third = format(1 / 3, ".17g")
    assert line == f"1,{third},{third},3,1"
    assert read_run_csv(tmp_path / "run-0.csv").ctr[0] == 1 / 3
