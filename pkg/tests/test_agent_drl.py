import csv

import numpy as np
import pytest
from scipy.stats import chisquare

from qpulse import agent_drl as drl
from qpulse.config import ExperimentConfig
from qpulse.dynamics import BathParams
from qpulse.neural import forward, init_network
from qpulse.rollout import Physics, PreparationEnv
from qpulse.taskset import TaskSet, environment_grid

BATH = BathParams(0.1, 4.0, 10.0)


def small_hyper(**kw):
    cfg = ExperimentConfig(case=2, algorithm="drl", bath=BATH)
    h = cfg.hyper
    h.update(kw)
    return h


# --- action selection

def test_select_action_exploit():
    rng = np.random.default_rng(0)
    p = init_network((8, 16, 27), 1)
    s = np.linspace(0, 1, 8)
    greedy = int(np.argmax(forward(p, s)))
    assert all(drl.select_action(p, s, 1.0, rng) == greedy for _ in range(100))


def test_select_action_tie_breaks_low():
    p = init_network((8, 4, 27), 0)
    for W in p.weights:
        W[:] = 0
    assert drl.select_action(p, np.ones(8), 1.0, np.random.default_rng(0)) == 0


def test_select_action_explore_is_uniform():
    rng = np.random.default_rng(1)
    p = init_network((8, 4, 27), 0)
    counts = np.bincount([drl.select_action(p, np.ones(8), 0.0, rng) for _ in range(10_000)],
                         minlength=27)
    assert chisquare(counts).pvalue > 1e-3


# --- rewards

def test_reward_examples():
    r = drl.RewardFunction()
    assert drl.compute_reward(0.5, False, r) == 0.5
    assert drl.compute_reward(0.9995, True, r) == 10
    assert drl.compute_reward(0.0, False, r) == 0
    g = drl.RewardFunction(kind="fidelity_gain_with_success_bonus")
    assert g(0.7, False, previous=0.5) == pytest.approx(0.2)
    assert g(0.9995, True, previous=0.5) == 10
    with pytest.raises(ValueError):
        drl.RewardFunction(kind="sparse")


def test_discounted_return_two_steps():
    assert drl.discounted_return([0.4, 0.8], 0.9) == pytest.approx(0.4 + 0.9 * 0.8)


def test_episode_rewards_use_previous_fidelity():
    g = drl.RewardFunction(kind="fidelity_gain_with_success_bonus")
    assert g.episode_rewards(0.2, [0.5, 0.4, 0.9995], 0.999) == pytest.approx([0.3, -0.1, 10])


# --- replay memory and targets

def test_replay_capacity_and_overwrite():
    m = drl.ReplayMemory(5, 2)
    for k in range(8):
        m.push(np.full(2, k), k % 27, float(k), np.full(2, k + 1), False)
    assert len(m) == 5
    assert set(m.r) == {3.0, 4.0, 5.0, 6.0, 7.0}
    with pytest.raises(ValueError):
        m.push(np.zeros(2), 27, 0.0, np.zeros(2), False)
    with pytest.raises(ValueError):
        m.push(np.zeros(2), 0, float("nan"), np.zeros(2), False)


def test_replay_sample_without_replacement():
    m = drl.ReplayMemory(50, 1)
    for k in range(40):
        m.push(np.array([k]), 0, float(k), np.array([k]), False)
    _, _, r, _, _ = m.sample(32, np.random.default_rng(0))
    assert len(set(r)) == 32


def test_terminal_masking():
    target = init_network((3, 5, 27), 0)
    r = np.array([0.3, 10.0, -1.0])
    s_next = np.ones((3, 3))
    np.testing.assert_array_equal(drl.td_targets(target, r, s_next, [True] * 3, 0.9), r)
    y = drl.td_targets(target, r, s_next, [False, True, False], 0.9)
    q = forward(target, s_next).max(axis=1)
    np.testing.assert_allclose(y, [0.3 + 0.9 * q[0], 10.0, -1.0 + 0.9 * q[2]])


def test_learn_step_fixed_point_and_warmup():
    from qpulse.neural import Optimizer
    main = init_network((3, 5, 27), 0)
    for W in main.weights:
        W[:] = 0
    main.biases[-1][:] = 1.0  # Q(s, a) = 1 everywhere
    mem = drl.ReplayMemory(100, 3)
    opt = Optimizer("sgd", 0.01)
    assert drl.learn_step(main, main.copy(), mem, np.random.default_rng(0), opt) is None
    for _ in range(40):
        mem.push(np.ones(3), 4, 1.0, np.ones(3), True)
    assert drl.learn_step(main, main.copy(), mem, np.random.default_rng(0), opt) == 0.0


def test_agent_target_sync_and_epsilon():
    hyper = small_hyper(replace_period=3, batch_size=4)
    agent = drl.DqnAgent((8, 6, 27), hyper, 0, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for _ in range(10):
        agent.memory.push(rng.random(8), int(rng.integers(27)), rng.random(), rng.random(8), False)
    probe = np.linspace(0, 1, 8)
    agent.learn()
    assert not np.allclose(forward(agent.main, probe), forward(agent.target, probe))
    agent.learn()
    agent.learn()
    np.testing.assert_array_equal(forward(agent.main, probe), forward(agent.target, probe))
    assert agent.schedule.value == pytest.approx(0.003)


def test_epsilon_schedule_capped_and_monotone():
    sch = drl.EpsilonSchedule(0.0, 0.001, 0.95)
    values = []
    for _ in range(1200):
        sch.advance()
        values.append(sch.value)
    assert np.all(np.diff(values) >= 0)
    assert max(values) == pytest.approx(0.95)


def test_bad_epsilon_mode():
    with pytest.raises(ValueError):
        drl.DqnAgent((8, 6, 27), small_hyper(epsilon_advance="sometimes"), 0,
                     np.random.default_rng(0))


# --- episodes

def test_episode_length_and_terminal_flag():
    ts = TaskSet.default()
    hyper = small_hyper(batch_size=4)
    agent = drl.DqnAgent((8, 6, 27), hyper, 0, np.random.default_rng(0))
    ini, tar = ts.densities(ts.subset("train")[0])
    env = PreparationEnv(ini, tar, BATH, 2, Physics(substeps=40))
    rec = drl.train_episode(agent, env)
    assert 1 <= rec.steps <= 10
    assert len(agent.memory) == rec.steps
    assert agent.memory.terminal[:rec.steps].tolist() == [False] * (rec.steps - 1) + [True]
    assert rec.best_fidelity >= env.score(ini)


def test_success_ends_episode_early():
    """A one-step task: from |0> towards the state one free rotation away."""
    from qpulse.dynamics import EvolutionState, propagate
    ini = np.diag([1, 0]).astype(complex)
    tar = propagate(EvolutionState.initial(ini), 0, BathParams(0.0, 4, 10)).rho
    hyper = small_hyper(batch_size=4)
    agent = drl.DqnAgent((8, 6, 27), hyper, 0, np.random.default_rng(0))
    agent.schedule.value = 1.0
    for W in agent.main.weights:
        W[:] = 0
    agent.main.biases[-1][:] = 0.0
    agent.main.biases[-1][0] = 1.0  # always J=0, phi=pi
    env = PreparationEnv(ini, tar, BathParams(0.0, 4, 10), 2)
    rec = drl.train_episode(agent, env)
    assert rec.steps == 1 and rec.succeeded
    assert agent.memory.terminal[0] and agent.memory.r[0] == 10.0


def test_tiny_training_run_writes_curve(tmp_path):
    ts = TaskSet.default()
    cfg = ExperimentConfig(case=1, algorithm="drl", substeps=20,
                           overrides={"epochs": 40, "validation_interval": 20,
                                      "hidden_layers": [8]})
    res = drl.train(cfg, ts, out_dir=tmp_path)
    assert len(res.curve) == 2
    assert res.metadata["bath"]["Gamma"] == 0.0  # case 1 trains noise-free
    assert res.metadata["optimizer"] == cfg.hyper["optimizer"]
    assert res.metadata["reward"]["kind"] == cfg.hyper["reward"]["kind"]
    with open(tmp_path / "learning_curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0])[:5] == drl.CURVE_COLUMNS
    eps = [float(r["epsilon"]) for r in rows]
    assert eps == sorted(eps) and max(eps) <= 0.95
    assert (tmp_path / "checkpoint.json").exists()
    assert (tmp_path / "learning_curve.csv.meta.json").exists()


def test_training_is_deterministic(tmp_path):
    ts = TaskSet.default()
    cfg = ExperimentConfig(case=3, algorithm="drl", substeps=20,
                           overrides={"epochs": 30, "validation_interval": 30,
                                      "hidden_layers": [8]})
    grid = environment_grid({"axes": {"Gamma": [0.0, 0.1], "gamma": [4.0], "T": [10.0]},
                             "held_out": []})
    drl.train(cfg, ts, grid, tmp_path / "a")
    drl.train(cfg, ts, grid, tmp_path / "b")
    assert (tmp_path / "a/checkpoint.json").read_bytes() == (tmp_path / "b/checkpoint.json").read_bytes()


def test_case3_needs_grid():
    cfg = ExperimentConfig(case=3, algorithm="drl")
    with pytest.raises(ValueError):
        drl.train(cfg, TaskSet.default())


def test_default_validation_baths():
    cfg3 = ExperimentConfig(case=3, algorithm="drl")
    assert [b.coupling for b in drl.default_validation_baths(cfg3, None)] == [0.01, 0.1, 0.4]
    cfg2 = ExperimentConfig(case=2, algorithm="drl", bath=BathParams(0.2, 4, 10))
    assert drl.default_validation_baths(cfg2, None) == [BathParams(0.2, 4, 10)]
