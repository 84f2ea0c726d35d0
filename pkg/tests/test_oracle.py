import itertools

import numpy as np
import pytest

from brpo.oracle import (L, R, S, LatentDiscreteMDP, RegimeViolation, all_sequences, belief_value_iteration,
                         enumerate_sequence_probability, mixture_table, play_tree_greedy, random_discrete_mdp,
                         simplex_grid, snap, tree_as_latent_mdp, tree_bayes_optimal,
                         tree_belief_value_iteration, tree_psrl_expected)


def test_tree_bayes_optimal_examples():
    for n in (2, 4, 8, 16):
        assert tree_bayes_optimal(n, 1) == (99.9, 99.9)
    assert tree_bayes_optimal(8, 10)[1] == 999.9
    assert tree_bayes_optimal(8, 0) == (0.0, 0.0)
    with pytest.raises(ValueError):
        tree_bayes_optimal(6, 1)


def test_tree_psrl_examples():
    assert tree_psrl_expected(2, 1) == 45.0
    assert tree_psrl_expected(8, 10) == 615.0
    gap = lambda n: tree_bayes_optimal(n, 10)[1] - tree_psrl_expected(n, 10)
    assert gap(16) > gap(4)
    with pytest.raises(RegimeViolation):
        tree_psrl_expected(16, 3)


@pytest.mark.parametrize("n,navigate", [(2, 45.0), (4, 17.5), (8, 3.75)])
def test_tree_value_iteration(n, navigate):
    tq = tree_belief_value_iteration(n)
    full = (1 << n) - 1
    np.testing.assert_allclose(tq.Q[0, full], [navigate, navigate, 99.9], atol=1e-12)
    assert tq.greedy(0, full) == S
    # point mass: the known single-MDP optimum
    for g in range(n):
        assert tq.value(0, 1 << g) == pytest.approx(100.0)


def test_tree_value_iteration_is_monotone():
    # Q = 0 is not a lower bound once costs are negative: the first sweep charges the sense cost
    # and all-tiger subsets fall to -10. After the first sweep, every entry whose fixed point is
    # nonnegative rises monotonically.
    tq = tree_belief_value_iteration(4)
    keep = np.isfinite(tq.Q) & (tq.Q >= 0)
    for prev, cur in zip(tq.history[1:-1], tq.history[2:]):
        assert np.all(cur[keep] >= prev[keep] - 1e-12)
    root = [np.max(h[0, 15]) for h in tq.history]
    assert root == sorted(root) and root[-1] == pytest.approx(99.9)


def test_greedy_policy_plays_optimally():
    tq = tree_belief_value_iteration(4)
    assert [play_tree_greedy(tq, g) for g in range(4)] == [pytest.approx(99.9)] * 4


def test_generic_belief_vi_reproduces_tree():
    mdp, idx = tree_as_latent_mdp(4)
    bq = belief_value_iteration(mdp, resolution=4)
    np.testing.assert_allclose(bq.q(idx["root"], np.full(4, 0.25)), [17.5, 17.5, 99.9], atol=1e-9)
    np.testing.assert_allclose(bq.q(idx["root"], np.eye(4)[2]), [-10.0, 100.0, 99.9], atol=1e-9)
    assert bq.greedy(idx["root"], np.full(4, 0.25)) == S


def test_generic_belief_vi_two_state_exact():
    # one decision: pick the arm that pays under the latent; the prior favours hypothesis 0
    T = np.zeros((2, 2, 2, 2))
    T[:, 0, :, 1] = 1.0
    T[:, 1, :, 1] = 1.0
    Rw = np.zeros_like(T)
    Rw[0, 0, 0, 1] = 1.0
    Rw[1, 0, 1, 1] = 1.0
    mdp = LatentDiscreteMDP(T, Rw, np.array([0.7, 0.3]), 1.0, np.array([False, True]),
                            np.ones((2, 2), dtype=bool))
    bq = belief_value_iteration(mdp, resolution=10)
    np.testing.assert_allclose(bq.q(0, [0.7, 0.3]), [0.7, 0.3], atol=1e-12)


def test_simplex_grid_and_snap():
    g = simplex_grid(3, 4)
    assert len(g) == 15
    np.testing.assert_allclose(g.sum(axis=1), 1.0)
    rng = np.random.default_rng(0)
    b = rng.dirichlet(np.ones(3), size=500)
    brute = np.argmin(((b[:, None, :] - g[None]) ** 2).sum(axis=2), axis=1)
    np.testing.assert_allclose(g[snap(b, g)], g[brute], atol=1e-12)


def test_mixture_table_is_distribution():
    rng = np.random.default_rng(0)
    pi_e, pi_r = rng.dirichlet(np.ones(3), size=4), rng.dirichlet(np.ones(3), size=4)
    np.testing.assert_allclose(mixture_table(pi_e, pi_r).sum(axis=1), 1.0, atol=1e-15)


def test_sequence_probability_base_case():
    mdp = random_discrete_mdp(np.random.default_rng(0))
    pi = np.full((3, 2), 0.5)
    for s in range(3):
        assert enumerate_sequence_probability(mdp, (pi, pi), [s]) == (mdp.P0[s], mdp.P0[s])


def test_sequence_probability_deterministic():
    P0 = np.array([1.0, 0.0, 0.0])
    T = np.zeros((3, 2, 3))
    T[np.arange(3), 0, (np.arange(3) + 1) % 3] = 1.0
    T[np.arange(3), 1, np.arange(3)] = 1.0
    from brpo.oracle import DiscreteMDP

    mdp = DiscreteMDP(P0, T)
    pi_e = np.tile([0.0, 1.0], (3, 1))
    pi_r = np.tile([0.0, 1.0], (3, 1))  # 1 + 1 = 0 mod 2: always advance
    for xi in all_sequences(3, 3):
        po, pr = enumerate_sequence_probability(mdp, (pi_e, pi_r), xi)
        assert po == pr and po in (0.0, 1.0)
    assert enumerate_sequence_probability(mdp, (pi_e, pi_r), [0, 1, 2]) == (1.0, 1.0)


def test_sequence_probabilities_agree_and_normalise():
    rng = np.random.default_rng(0)
    for _ in range(5):
        mdp = random_discrete_mdp(rng)
        pi_e, pi_r = rng.dirichlet(np.ones(2), size=3), rng.dirichlet(np.ones(2), size=3)
        pairs = [enumerate_sequence_probability(mdp, (pi_e, pi_r), xi) for xi in all_sequences(3, 3)]
        po, pr = np.array(pairs).T
        np.testing.assert_allclose(po, pr, atol=1e-12, rtol=0)
        assert abs(po.sum() - 1) < 1e-12 and abs(pr.sum() - 1) < 1e-12
