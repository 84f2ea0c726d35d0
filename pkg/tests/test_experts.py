from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from brpo.envs import CartpoleEnv, DoorsEnv, Latents, MazeEnv, TreeEnv
from brpo.envs.cartpole import GRID_PARAMS, linearize
from brpo.envs.layout import inside_walls, line_of_sight
from brpo.experts import (EXPERT_STD, Ensemble, SenseChannelAbsent, SingularPrecision, combine_gaussian,
                          expert_bank, goal_expert_action, lqr_solve, map_expert, planner_for,
                          random_sensing_augment, scheduled_sensing_augment)

from conftest import probability_vectors


# ---------------------------------------------------------------- LQR

def test_lqr_examples():
    g = lqr_solve(0.0, 1.0, 1.0, 1.0)
    assert g.P[0, 0] == pytest.approx(1.0) and g.K[0, 0] == pytest.approx(0.0)
    g = lqr_solve(0.5, 1.0, 0.0, 1.0)
    assert g.P[0, 0] == 0.0 and g.K[0, 0] == 0.0
    g = lqr_solve(0.9, 1.0, 1.0, 1.0)
    # positive root of P^2 - 0.81 P - 1 = 0, and K = A B P / (R + B^2 P)
    assert g.P[0, 0] == pytest.approx(1.48389990267865, abs=1e-8)
    assert g.K[0, 0] == pytest.approx(0.5376665585318331, abs=1e-8)


def test_lqr_matches_scipy_dare():
    from scipy.linalg import solve_discrete_are

    rng = np.random.default_rng(0)
    for _ in range(5):
        A = rng.normal(size=(3, 3)) * 0.5
        B = rng.normal(size=(3, 1))
        Q, R = np.eye(3), np.array([[0.5]])
        P = solve_discrete_are(A, B, Q, R)
        np.testing.assert_allclose(lqr_solve(A, B, Q, R).P, P, rtol=1e-6)


def test_cartpole_gains_stabilise_every_cell():
    for m, l in GRID_PARAMS:
        A, B = linearize(m, l)
        K = lqr_solve(A, B, np.diag([1.0, 1.0, 10.0, 1.0]), np.array([[0.1]])).K
        assert np.max(np.abs(np.linalg.eigvals(A - B @ K))) < 1


# ---------------------------------------------------------------- combiners

def test_combine_examples():
    assert combine_gaussian([0.5, 0.5], [[1.0], [0.0]], [[1.0], [4.0]])[0] == pytest.approx(0.8, abs=1e-15)
    means = np.array([[1.0, 2.0], [3.0, -1.0], [0.0, 0.5]])
    b = np.array([0.2, 0.5, 0.3])
    np.testing.assert_allclose(combine_gaussian(b, means, np.ones_like(means)), b @ means, atol=1e-15)
    np.testing.assert_array_equal(combine_gaussian([1.0, 0.0, 0.0], means, np.ones_like(means)), means[0])
    with pytest.raises(SingularPrecision):
        combine_gaussian([0.5, 0.5], [[1.0], [0.0]], [[0.0], [1.0]])


def _jensen_argmax(b, means, covs):
    prec = np.linalg.inv(covs)

    def neg(a):
        d = a[None] - means
        return 0.5 * np.einsum("k,ki,kij,kj->", b, d, prec, d)

    def grad(a):
        d = a[None] - means
        return np.einsum("k,kij,kj->i", b, prec, d)

    res = minimize(neg, np.zeros(means.shape[1]), jac=grad, method="BFGS", options={"gtol": 1e-12})
    return res.x


def test_combine_matches_numerical_ascent():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k, d = rng.integers(2, 6), rng.integers(1, 4)
        b = rng.dirichlet(np.ones(k))
        means = rng.normal(size=(k, d)) * 2
        L = rng.normal(size=(k, d, d))
        covs = L @ L.transpose(0, 2, 1) + 0.3 * np.eye(d)
        np.testing.assert_allclose(combine_gaussian(b, means, covs), _jensen_argmax(b, means, covs), atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(probability_vectors(2, 6), st.floats(1e-3, 1e3), st.integers(0, 2**16))
def test_combine_invariant_to_belief_scale(b, c, seed):
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(len(b), 2))
    covs = rng.uniform(0.1, 2.0, size=(len(b), 2))
    np.testing.assert_allclose(combine_gaussian(c * b, means, covs), combine_gaussian(b, means, covs),
                               rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.data())
def test_point_mass_returns_expert_exactly(k, data):
    j = data.draw(st.integers(0, k - 1))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**16)))
    means = rng.normal(size=(k, 3))
    b = np.zeros(k)
    b[j] = 1.0
    np.testing.assert_array_equal(combine_gaussian(b, means, rng.uniform(0.1, 2, size=(k, 3))), means[j])


def test_map_expert_examples():
    env = TreeEnv(depth=1)
    bank = expert_bank(env)
    root = np.zeros(2)
    left, _ = map_expert([1.0, 0.0], bank, root)
    tie, _ = map_expert([0.5, 0.5], bank, root)
    right, _ = map_expert([0.3, 0.7], bank, root)
    assert left[0] < 0 and right[0] > 0
    np.testing.assert_array_equal(tie, left)


# ---------------------------------------------------------------- sensing augmentation

def test_random_sensing():
    a = np.zeros((100_000, 3))
    rng = np.random.default_rng(0)
    assert np.all(random_sensing_augment(a, 0.0, rng, 2)[:, 2] == -1)
    assert np.all(random_sensing_augment(a, 1.0, rng, 2)[:, 2] == 1)
    frac = np.mean(random_sensing_augment(a, 0.5, rng, 2)[:, 2] > 0)
    assert abs(frac - 0.5) < 0.01
    with pytest.raises(SenseChannelAbsent):
        random_sensing_augment(a, 0.5, rng, None)


def test_scheduled_sensing():
    a = np.zeros((1, 3))
    assert scheduled_sensing_augment(a, 0, 150, 2)[0, 2] == 1
    assert scheduled_sensing_augment(a, 149, 150, 2)[0, 2] == 1
    assert scheduled_sensing_augment(a, 150, 150, 2)[0, 2] == -1
    assert scheduled_sensing_augment(a, 0, 0, 2)[0, 2] == -1


def test_ensemble_rejects_sensing_without_channel():
    with pytest.raises(SenseChannelAbsent):
        Ensemble(expert_bank(CartpoleEnv()), sensing=("random", 0.5))


# ---------------------------------------------------------------- planner experts

def test_goal_expert_degenerate_cases():
    env = MazeEnv("maze4")
    goal = env.goals[0]
    mean, cov = goal_expert_action(env.layout, 0, np.r_[goal + [0.0, -0.6], 0, 0])
    np.testing.assert_allclose(mean[:2] / np.linalg.norm(mean[:2]), [0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(cov, EXPERT_STD ** 2)
    mean, _ = goal_expert_action(env.layout, 0, np.r_[goal, 0, 0])
    np.testing.assert_array_equal(mean, 0.0)


def _bfs_length(layout, start, goal, cell=0.25, margin=0.15):
    """Independent 8-connected BFS with unit edge costs scaled afterwards."""
    x0, y0, x1, y1 = layout.bounds
    nx, ny = int((x1 - x0) / cell), int((y1 - y0) / cell)
    cx = x0 + (np.arange(nx) + 0.5) * cell
    cy = y0 + (np.arange(ny) + 0.5) * cell
    pts = np.array([(x, y) for x in cx for y in cy])
    free = (~inside_walls(pts, layout.all_walls, margin)).reshape(nx, ny)
    s = (int((start[0] - x0) / cell), int((start[1] - y0) / cell))
    g = (int((goal[0] - x0) / cell), int((goal[1] - y0) / cell))
    dist = {s: 0}
    q = deque([s])
    while q:
        c = q.popleft()
        if c == g:
            return dist[c] * cell
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                n = (c[0] + dx, c[1] + dy)
                if n in dist or not (0 <= n[0] < nx and 0 <= n[1] < ny) or not free[n]:
                    continue
                if dx and dy and not (free[c[0] + dx, c[1]] and free[c[0], c[1] + dy]):
                    continue
                dist[n] = dist[c] + 1
                q.append(n)
    raise AssertionError("goal unreachable")


def test_goal_expert_behind_wall_follows_path():
    env = MazeEnv("maze4")
    start = np.array([5.0, 1.0])
    goal_idx = 1
    goal = env.goals[goal_idx]
    assert not line_of_sight(start[None], goal[None], env.walls)[0]
    mean, _ = goal_expert_action(env.layout, goal_idx, np.r_[start, 0, 0])
    to_goal = (goal - start) / np.linalg.norm(goal - start)
    assert np.dot(mean[:2] / np.linalg.norm(mean[:2]), to_goal) < 0.99
    target = planner_for(env.layout).targets(start[None], goal_idx)[0, 0]
    assert line_of_sight(start[None], target[None], env.walls)[0]

    lat = Latents(np.array([goal_idx]), goal[None])
    state = np.zeros((1, env.spec.state_dim))
    state[0, :2] = start
    steps = 0
    rng = np.random.default_rng(0)
    while steps < 200:
        a, _ = goal_expert_action(env.layout, goal_idx, state[0])
        out = env.step(state, lat, a[None], rng)
        state = out.next_states
        steps += 1
        if out.dones[0]:
            break
    assert out.rewards[0] == 500.0
    # planned route is no longer than the grid BFS route (BFS counts diagonal moves as one cell)
    assert steps <= np.ceil(_bfs_length(env.layout, start, goal) * np.sqrt(2)) + 2


@pytest.mark.parametrize("name", ["maze4", "maze10"])
def test_clairvoyant_maze_experts_reach_their_goal(name):
    env = MazeEnv(name)
    bank = expert_bank(env)
    n = env.n_goals * 4
    rng = np.random.default_rng(0)
    states, _ = env.reset(rng, n)
    idx = np.repeat(np.arange(env.n_goals), 4)
    lat = Latents(idx, env.goals[idx])
    done = np.zeros(n, dtype=bool)
    ret = np.zeros(n)
    for _ in range(env.spec.horizon):
        means, _ = bank.recommend(states)
        out = env.step(states, lat, means[np.arange(n), idx], rng)
        ret += np.where(done, 0, out.rewards)
        done |= out.dones
        states = out.next_states
        if done.all():
            break
    assert done.all()
    if name == "maze4":
        assert np.all(ret == 500.0)
    else:
        # shortest paths may brush an inactive goal, which costs 50 once
        assert np.all(ret >= 500.0 - 50 * (env.n_goals - 1))


def test_clairvoyant_doors_experts_never_crash():
    env = DoorsEnv()
    bank = expert_bank(env)
    rng = np.random.default_rng(0)
    n = 64
    states, lat = env.reset(rng, n)
    reached = np.zeros(n, dtype=bool)
    crashed = np.zeros(n, dtype=bool)
    for _ in range(env.spec.horizon):
        means, _ = bank.recommend(states)
        out = env.step(states, lat, means[np.arange(n), lat.index], rng)
        crashed |= (out.info["crashed"] >= 0) & ~reached
        reached |= out.dones
        states = out.next_states
    has_open = lat.params.sum(axis=1) > 0
    assert not crashed.any()
    np.testing.assert_array_equal(reached, has_open)
