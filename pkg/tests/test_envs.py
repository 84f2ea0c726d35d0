import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brpo.belief import BayesFilter, map_index
from brpo.envs import (CartpoleEnv, DoorsEnv, DoorsFilter, IllegalAction, Latents, MazeEnv, TreeEnv,
                       cartpole_step, doors_step, env_reset, make_env, make_filter, maze_step,
                       observation_likelihood, parse_layout, tree_step)
from brpo.envs.cartpole import CELL_CENTERS, GRID_PARAMS, LATENT_HIGH, LATENT_LOW
from brpo.envs.doors import CONFIGS, WALL_Y, door_distances, sense_accuracy
from brpo.envs.layout import LayoutError
from brpo.envs.tree import LEFT, RIGHT, SENSE
from brpo.experts import expert_bank


# ---------------------------------------------------------------- reset

@pytest.mark.parametrize("name", ["tree", "doors", "maze4", "maze10", "cartpole"])
def test_reset_is_deterministic(name):
    env = make_env(name)
    s1, l1 = env_reset(env, 1234)
    s2, l2 = env_reset(env, 1234)
    np.testing.assert_array_equal(s1, s2)
    assert l1.index == l2.index
    np.testing.assert_array_equal(l1.params, l2.params)
    assert 0 <= l1.index < env.k
    assert 0 < env.spec.discount <= 1 and env.spec.horizon >= 1


def test_doors_prior_is_independent_fair_coins():
    env = DoorsEnv()
    _, lat = env.reset(np.random.default_rng(0), 100_000)
    np.testing.assert_allclose(lat.params.mean(axis=0), 0.5, atol=0.01)
    corr = np.corrcoef(lat.params.T)
    assert np.max(np.abs(corr - np.eye(4))) < 0.02
    np.testing.assert_array_equal(CONFIGS[lat.index], lat.params)


def test_cartpole_prior():
    env = CartpoleEnv()
    states, lat = env.reset(np.random.default_rng(0), 20_000)
    assert lat.params.min() >= LATENT_LOW and lat.params.max() <= LATENT_HIGH
    np.testing.assert_allclose(lat.params.mean(axis=0), (LATENT_LOW + LATENT_HIGH) / 2, atol=0.02)
    assert np.abs(states).max() <= 0.05
    np.testing.assert_array_equal(np.bincount(lat.index, minlength=9) > 0, True)


# ---------------------------------------------------------------- tree

def test_tree_steps():
    env = TreeEnv(depth=2)
    state, lat = env.reset_one(0)
    out = tree_step(env, state, lat, SENSE)
    assert out.reward == pytest.approx(-0.1) and not out.done
    assert out.observation[1] == lat.index
    s = state
    for a in env.leaf_path(lat.index):
        out = tree_step(env, s, lat, a)
        s = out.next_state
    assert out.reward == 100.0 and out.done
    wrong = (lat.index + 1) % env.n_leaves
    s = state
    for a in env.leaf_path(wrong):
        out = tree_step(env, s, lat, a)
        s = out.next_state
    assert out.reward == -10.0 and out.done


def test_tree_illegal_actions():
    env = TreeEnv(depth=2)
    state, lat = env.reset_one(0)
    s1 = tree_step(env, state, lat, LEFT).next_state
    with pytest.raises(IllegalAction):
        tree_step(env, s1, lat, SENSE)
    s2 = tree_step(env, s1, lat, LEFT).next_state
    with pytest.raises(IllegalAction):
        tree_step(env, s2, lat, LEFT)


def test_tree_continuous_decoding():
    env = TreeEnv(depth=2)
    root = np.zeros((3, 2))
    np.testing.assert_array_equal(env.decode(root, [[-1, -1], [1, -1], [-1, 0.5]]), [LEFT, RIGHT, SENSE])
    # sensing below the root is not available, so the move channel decides
    np.testing.assert_array_equal(env.decode(np.array([[1.0, 0.0]]), [[1, 1]]), [RIGHT])


def test_tree_likelihood_is_exact():
    env = TreeEnv(depth=2)
    state, lat = env.reset_one(3)
    out = tree_step(env, state, lat, SENSE)
    lik = [observation_likelihood(env, state, [0, 1], out.next_state, out.observation, j) for j in range(4)]
    assert lik == [1.0 if j == lat.index else 0.0 for j in range(4)]
    with pytest.raises(IndexError):
        observation_likelihood(env, state, [0, 1], out.next_state, out.observation, 4)


def test_make_env_rejects_bad_leaves():
    with pytest.raises(ValueError):
        make_env("tree", leaves=3)
    with pytest.raises(ValueError):
        make_env("nope")


# ---------------------------------------------------------------- doors

def test_doors_crash_into_closed_door():
    env = DoorsEnv()
    lat = Latents(np.array([0]), CONFIGS[[0]])  # every door closed
    state = np.array([-3.0, 9.5, 0.0, 0.0])
    out = doors_step(env, state, lat.sample(0), [0.0, 1.0, -1.0], np.random.default_rng(0))
    assert out.reward == -10.0 and out.info["crashed"] == 0 and not out.done
    assert out.next_state[1] < WALL_Y
    ll = env.log_likelihood(state[None], np.array([[0, 1, -1.0]]), out.next_state[None], out.observation[None])[0]
    lik = np.exp(ll)
    # door 0 is known closed; the others remain uninformative
    np.testing.assert_array_equal(lik > 0, CONFIGS[:, 0] == 0)


def test_doors_pass_and_goal():
    env = DoorsEnv()
    lat = Latents(np.array([15]), CONFIGS[[15]]).sample(0)
    state = np.array([1.0, 9.5, 0.0, 0.0])
    rng = np.random.default_rng(0)
    out = doors_step(env, state, lat, [0.0, 1.0, -1.0], rng)
    assert out.info["crashed"] == -1 and out.next_state[1] > WALL_Y
    out = doors_step(env, out.next_state, lat, [0.0, 1.0, -1.0], rng)
    assert out.reward == 100.0 and out.done


def test_doors_sense_cost_and_accuracy():
    env = DoorsEnv()
    n = 200_000
    lat = Latents(np.full(n, 5), np.tile(CONFIGS[5], (n, 1)))
    states = np.zeros((n, 4))
    out = env.step(states, lat, np.tile([0.0, 0.0, 1.0], (n, 1)), np.random.default_rng(0))
    assert np.all(out.rewards == -1.0)
    d = door_distances(np.zeros((1, 2)))[0]
    np.testing.assert_allclose(d, np.hypot([3.0, 1.0, 1.0, 3.0], WALL_Y))
    acc = (out.observations[:, 1:5] == CONFIGS[5]).mean(axis=0)
    np.testing.assert_allclose(acc, sense_accuracy(d), atol=0.005)
    assert sense_accuracy(0.0) == 1.0
    assert sense_accuracy(2.0) == pytest.approx(0.5 + 0.5 * math.exp(-1.0))


def test_doors_sense_likelihood_is_product_of_bits():
    env = DoorsEnv()
    state = np.array([[0.0, 8.0, 0.0, 0.0]])
    obs = np.full((1, 7), -1.0)
    obs[0, 0] = 1
    obs[0, 1:5] = CONFIGS[9]
    lik = np.exp(env.log_likelihood(state, [[0, 0, 1]], state, obs))[0]
    p = sense_accuracy(door_distances(state[:, :2])[0])
    assert lik[9] == pytest.approx(np.prod(p), rel=1e-12)
    assert lik[9 ^ 1] == pytest.approx(np.prod(p[1:]) * (1 - p[0]), rel=1e-12)


def test_doors_factored_filter_matches_joint():
    env = DoorsEnv()
    filt, joint = DoorsFilter(env), BayesFilter(env)
    rng = np.random.default_rng(3)
    n = 64
    states, lat = env.reset(rng, n)
    f, b = filt.init(n), joint.init(n)
    for t in range(40):
        a = np.column_stack([rng.uniform(-1, 1, n), np.full(n, 0.6), rng.uniform(-1, 1, n)])
        out = env.step(states, lat, a, rng)
        f = filt.update(f, states, a, out.next_states, out.observations)
        b = joint.update(b, states, a, out.next_states, out.observations)
        states = out.next_states
    np.testing.assert_allclose(filt.probs(f), b, atol=1e-12)


def test_doors_map_accuracy_rises_with_sensing_rate():
    env = DoorsEnv()
    filt = DoorsFilter(env)
    n, steps = 100_000, 10
    hits = []
    for p in (0.0, 0.5, 1.0):
        rng = np.random.default_rng(7)
        states, lat = env.reset(rng, n)
        states[:, 1] = 8.0  # hold position two units from the wall
        f = filt.init(n)
        for _ in range(steps):
            a = np.zeros((n, 3))
            a[:, 2] = np.where(rng.random(n) < p, 1.0, -1.0)
            out = env.step(states, lat, a, rng)
            f = filt.update(f, states, a, out.next_states, out.observations)
            states = out.next_states
        hits.append(np.mean(map_index(filt.probs(f)) == lat.index))
    assert hits[0] < hits[1] < hits[2]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_doors_never_inside_wall(seed):
    env = DoorsEnv()
    rng = np.random.default_rng(seed)
    states, lat = env.reset(rng, 32)
    for _ in range(30):
        a = np.column_stack([rng.uniform(-2, 2, 32), rng.uniform(-0.5, 2, 32), rng.uniform(-1, 1, 32)])
        out = env.step(states, lat, a, rng)
        y0, y1 = states[:, 1], out.next_states[:, 1]
        crossed = (y0 < WALL_Y) != (y1 < WALL_Y)
        passed = out.observations[:, 6] >= 0
        np.testing.assert_array_equal(crossed, passed)
        states = out.next_states


# ---------------------------------------------------------------- maze

def test_maze_reach_active_goal():
    env = MazeEnv("maze4")
    state = np.zeros(env.spec.state_dim)
    state[:2] = env.goals[1] - [0.0, 0.5]
    lat = Latents(np.array([1]), env.goals[[1]]).sample(0)
    out = maze_step(env, state, lat, [0.0, 1.0, -1.0], np.random.default_rng(0))
    assert out.reward == 500.0 and out.done


def test_maze10_inactive_goal_penalised_once():
    env = MazeEnv("maze10")
    state = np.zeros(env.spec.state_dim)
    state[:2] = env.goals[0] - [0.0, 0.5]
    lat = Latents(np.array([5]), env.goals[[5]]).sample(0)
    rng = np.random.default_rng(0)
    out = maze_step(env, state, lat, [0.0, 1.0, -1.0], rng)
    assert out.reward == -50.0 and not out.done
    back = maze_step(env, out.next_state, lat, [0.0, -0.8, -1.0], rng)
    again = maze_step(env, back.next_state, lat, [0.0, 0.8, -1.0], rng)
    assert again.reward == 0.0


def test_maze_sense_at_zero_distance_is_exact():
    env = MazeEnv("maze4")
    state = np.zeros((1, env.spec.state_dim))
    state[0, :2] = env.goals[2]
    out = env.step(state, Latents(np.array([2]), env.goals[[2]]), np.array([[0.0, 0.0, 1.0]]),
                   np.random.default_rng(0))
    assert out.observations[0, 1] == 0.0


def test_maze_without_sensing_is_uninformative():
    env = MazeEnv("maze4")
    rng = np.random.default_rng(0)
    states, lat = env.reset(rng, 16)
    a = np.tile([0.3, 0.3, -1.0], (16, 1))
    out = env.step(states, lat, a, rng)
    np.testing.assert_array_equal(env.likelihood(states, a, out.next_states, out.observations), 1.0)


@pytest.mark.parametrize("name", ["maze4", "maze10"])
def test_maze_never_penetrates_walls(name):
    env = MazeEnv(name)
    rng = np.random.default_rng(11)
    states, lat = env.reset(rng, 256)
    for _ in range(60):
        a = np.column_stack([rng.uniform(-2, 2, (256, 2)), -np.ones(256)])
        out = env.step(states, lat, a, rng)
        assert env.in_free_space(out.next_states[:, :2]).all()
        states = np.where(out.dones[:, None], states, out.next_states)


def test_layout_errors():
    with pytest.raises(LayoutError):
        parse_layout("format brpo-maze 2\nname x\n")
    with pytest.raises(LayoutError):
        parse_layout("format brpo-maze 1\nname x\nbounds 0 0 1\n")


def test_layout_hash_is_stable():
    a, b = MazeEnv("maze4"), MazeEnv("maze4")
    assert a.layout_hash == b.layout_hash != MazeEnv("maze10").layout_hash


# ---------------------------------------------------------------- cartpole

def test_cartpole_examples():
    env = CartpoleEnv(noise_std=0.0)
    lat = Latents(np.array([4]), GRID_PARAMS[[4]]).sample(0)
    out = cartpole_step(env, np.zeros(4), lat, [0.0], np.random.default_rng(0))
    assert out.reward == 1.0 and not out.done
    tilted = np.array([0.0, 0.0, 1.3, 0.0])
    assert cartpole_step(env, tilted, lat, [0.0]).done
    far = np.array([4.5, 0.0, 0.0, 0.0])
    assert cartpole_step(env, far, lat, [0.0]).done


def test_cartpole_lqr_survives_at_cell_centres():
    env = CartpoleEnv(noise_std=0.0)
    bank = expert_bank(env)
    n = len(GRID_PARAMS)
    lat = Latents(np.arange(n), GRID_PARAMS.copy())
    states = np.tile([0.02, 0.0, 0.05, 0.0], (n, 1))
    alive = np.ones(n, dtype=bool)
    for _ in range(500):
        means, _ = bank.recommend(states)
        a = means[np.arange(n), np.arange(n)]
        out = env.step(states, lat, a, np.random.default_rng(0))
        alive &= ~out.dones
        states = out.next_states
    assert alive.all()


def test_cartpole_likelihood_prefers_truth():
    env = CartpoleEnv()
    rng = np.random.default_rng(0)
    n = len(GRID_PARAMS)
    lat = Latents(np.arange(n), GRID_PARAMS.copy())
    states = np.tile([0.0, 0.0, 0.1, 0.0], (n, 1))
    b = make_filter(env).init(n)
    filt = make_filter(env)
    for _ in range(30):
        a = rng.uniform(-5, 5, (n, 1))
        out = env.step(states, lat, a, rng)
        b = filt.update(b, states, a, out.next_states, out.observations)
        states = out.next_states
    assert np.mean(map_index(b) == np.arange(n)) >= 7 / 9
    assert len(CELL_CENTERS) == 3
