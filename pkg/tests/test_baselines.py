import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brpo.baselines import (bpo_input, info_bonus, latent_descriptors, psrl_episode, psrl_tree_returns,
                            upmle_input)
from brpo.envs import CartpoleEnv, TreeEnv
from brpo.envs.cartpole import GRID_PARAMS
from brpo.oracle import tree_psrl_expected

from conftest import probability_vectors


def test_bpo_input_examples():
    x = bpo_input(np.arange(4.0), [1.0, 0.0])
    assert x.shape == (6,)
    np.testing.assert_array_equal(x[4:], [1.0, 0.0])
    np.testing.assert_array_equal(bpo_input(np.zeros(2), np.full(4, 0.25))[2:], 0.25)
    b = np.array([0.1, 0.2, 0.7])
    perm = np.array([2, 0, 1])
    np.testing.assert_array_equal(bpo_input(np.zeros(1), b[perm])[1:], bpo_input(np.zeros(1), b)[1:][perm])


def test_upmle_input_examples():
    desc = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(upmle_input(np.zeros(1), [0.9, 0.1], desc), [0.0, 1.0, 2.0])
    np.testing.assert_array_equal(upmle_input(np.zeros(1), [0.5, 0.5], desc), [0.0, 1.0, 2.0])
    np.testing.assert_array_equal(upmle_input(np.zeros(1), [0.2, 0.8], desc), [0.0, 3.0, 4.0])


def test_upmle_cartpole_appends_map_cell_centre():
    env = CartpoleEnv()
    b = np.full(9, 0.05)
    b[6] = 0.6
    x = upmle_input(np.zeros(4), b, env.latent_params)
    np.testing.assert_array_equal(x[4:], GRID_PARAMS[6])


def test_latent_descriptors_range():
    d = latent_descriptors(np.array([[0.0, 5.0], [2.0, 5.0], [4.0, 5.0]]))
    np.testing.assert_array_equal(d[:, 0], [-1.0, 0.0, 1.0])
    np.testing.assert_array_equal(d[:, 1], 0.0)


def test_info_bonus_examples():
    assert info_bonus(3.0, [0.5, 0.5], [1.0, 0.0], 0.0) == 3.0
    assert info_bonus(3.0, [0.5, 0.5], [0.5, 0.5], 10.0) == 3.0
    assert info_bonus(1.0, [0.5, 0.5], [0.8, 0.2], 10.0) == pytest.approx(7.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6).flatmap(lambda k: st.tuples(probability_vectors(k, k), probability_vectors(k, k))),
       st.floats(-10, 10), st.floats(0, 100))
def test_info_bonus_never_decreases_reward(pair, r, eps):
    assert info_bonus(r, pair[0], pair[1], eps) >= r


def test_psrl_episode_examples():
    env = TreeEnv(depth=2)
    rng = np.random.default_rng(0)
    ret, post = psrl_episode(np.array([0, 0, 1.0, 0]), 2, env, rng=rng)
    assert ret == 100.0
    np.testing.assert_array_equal(post, [0, 0, 1, 0])
    outcomes = set()
    for _ in range(20):
        ret, post = psrl_episode(np.array([0.5, 0, 0.5, 0]), 2, env, rng=rng)
        outcomes.add(ret)
        # either way the posterior collapses onto the gold leaf; a miss zeroes the sampled leaf
        np.testing.assert_array_equal(post, [0, 0, 1, 0])
    assert outcomes == {100.0, -10.0}
    ret, post = psrl_episode(np.full(4, 0.25), 0, env, rng=np.random.default_rng(1))
    if ret == -10.0:
        assert np.count_nonzero(post) == 3 and post[0] > 0


def test_psrl_support_never_regrows():
    env = TreeEnv(depth=3)
    rng = np.random.default_rng(1)
    for _ in range(30):
        gold = int(rng.integers(8))
        post = np.full(8, 1 / 8)
        support = post > 0
        for _ in range(10):
            _, post = psrl_episode(post, gold, env, rng=rng)
            assert not np.any((post > 0) & ~support)
            support = post > 0
        assert post[gold] == 1.0


def test_psrl_batched_matches_episode_loop():
    env = TreeEnv(depth=2)
    rng = np.random.default_rng(2)
    loop = []
    for _ in range(4000):
        gold = int(rng.integers(4))
        post, total = np.full(4, 0.25), 0.0
        for _ in range(5):
            r, post = psrl_episode(post, gold, env, rng=rng)
            total += r
        loop.append(total)
    batched = psrl_tree_returns(4, 5, 4000, np.random.default_rng(3))
    se = np.sqrt(np.var(loop, ddof=1) / len(loop) + batched.var(ddof=1) / len(batched))
    assert abs(np.mean(loop) - batched.mean()) < 3 * se


def test_psrl_monte_carlo_matches_formula():
    totals = psrl_tree_returns(8, 10, 100_000, np.random.default_rng(0))
    assert abs(totals.mean() - tree_psrl_expected(8, 10)) < 3.0
    per = psrl_tree_returns(8, 10, 10, np.random.default_rng(0), per_episode=True)
    assert per.shape == (10, 10)
