"""Exact ground truth on small problems.

* closed forms for the tree MDP (Bayes-optimal and PSRL cumulative returns),
* belief-space value iteration: exact on the tree (beliefs are uniform over a subset
  of leaves), approximate with simplex-grid snapping for general latent MDPs,
* exhaustive state-sequence probabilities for a mixture policy on M versus the
  residual policy on M_r.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .residual import residual_transition_matrix

SENSE_COST = 0.1
GOLD, TIGER = 100.0, -10.0


class RegimeViolation(ValueError):
    pass


class NonConvergence(RuntimeError):
    pass


def _check_leaves(n_leaves: int) -> int:
    depth = int(n_leaves).bit_length() - 1
    if n_leaves < 2 or 2 ** depth != n_leaves:
        raise ValueError(f"leaf count must be 2^d with d >= 1, got {n_leaves}")
    return depth


def tree_bayes_optimal(n_leaves: int, n_episodes: int) -> tuple[float, float]:
    """(first-episode value, cumulative value over ``n_episodes``): sense once, then walk to the gold."""
    _check_leaves(n_leaves)
    if n_episodes <= 0:
        return 0.0, 0.0
    return GOLD - SENSE_COST, GOLD * n_episodes - SENSE_COST


def tree_psrl_expected(n_leaves: int, n_episodes: int) -> float:
    """Expected cumulative PSRL return: (N-1)/2 tiger visits on average, gold every other episode."""
    _check_leaves(n_leaves)
    mistakes = (n_leaves - 1) / 2
    if n_episodes < mistakes:
        raise RegimeViolation(f"need at least {mistakes} episodes for {n_leaves} leaves, got {n_episodes}")
    return TIGER * mistakes + GOLD * (n_episodes - mistakes)


# ---------------------------------------------------------------- exact tree belief VI

L, R, S = 0, 1, 2


@dataclass
class TreeQ:
    """Q[node, subset, action] over heap-indexed internal nodes and leaf subsets (bitmasks)."""

    n_leaves: int
    Q: np.ndarray
    iterations: int
    history: list

    def value(self, node: int = 0, subset: int | None = None) -> float:
        subset = (1 << self.n_leaves) - 1 if subset is None else subset
        return float(np.max(self.Q[node, subset]))

    def greedy(self, node: int, subset: int) -> int:
        """Best action; ties go to the lowest action index (L < R < S)."""
        return int(np.argmax(self.Q[node, subset]))


def _leaves_below(node: int, depth: int) -> range:
    # heap index -> (level, offset)
    level = (node + 1).bit_length() - 1
    offset = node - (2 ** level - 1)
    width = 2 ** (depth - level)
    return range(offset * width, (offset + 1) * width)


def tree_belief_value_iteration(n_leaves: int, tol: float = 1e-10, max_iter: int = 1000) -> TreeQ:
    """Value iteration over (internal node, uniform belief on a leaf subset) for one episode.

    Sense (root only) costs 0.1 and collapses the belief to the gold leaf. Moving into a
    leaf ends the episode with +100 on gold and -10 otherwise; a tiger leaf carries no
    further reward so the belief update at the leaf needs no successor state.
    Starting from Q = 0, Jacobi sweeps are applied until the sup-norm change is below ``tol``.
    """
    depth = _check_leaves(n_leaves)
    n_internal = n_leaves - 1
    n_sub = 1 << n_leaves
    pop = np.array([bin(m).count("1") for m in range(n_sub)], dtype=float)
    Q = np.zeros((n_internal, n_sub, 3))
    Q[:, 0, :] = 0.0
    valid = np.zeros((n_internal, 3), dtype=bool)
    valid[:, :2] = True
    valid[0, S] = True
    history = [Q.copy()]
    for it in range(1, max_iter + 1):
        V = np.where(valid[:, None, :], Q, -np.inf).max(axis=2)
        V[:, 0] = 0.0
        new = np.full_like(Q, -np.inf)
        for node in range(n_internal):
            for a in (L, R):
                child = 2 * node + 1 + a
                if child >= n_internal:  # child is a leaf
                    leaf = child - n_internal
                    bit = 1 << leaf
                    p_gold = np.where(pop > 0, ((np.arange(n_sub) & bit) > 0) / np.maximum(pop, 1), 0.0)
                    new[node, :, a] = p_gold * GOLD + (1 - p_gold) * TIGER
                    new[node, 0, a] = 0.0
                else:
                    # no evidence until a leaf is reached: belief subset is unchanged
                    new[node, :, a] = V[child]
            if valid[node, S]:
                # sensing reveals the gold: average over gold in subset of V(node, {gold})
                for m in range(1, n_sub):
                    golds = [g for g in range(n_leaves) if m >> g & 1]
                    new[node, m, S] = -SENSE_COST + np.mean([V[node, 1 << g] for g in golds])
                new[node, 0, S] = 0.0
        new[~np.broadcast_to(valid[:, None, :], new.shape)] = -np.inf
        finite = np.isfinite(new)
        delta = np.max(np.abs(np.where(finite, new - np.where(np.isfinite(Q), Q, 0.0), 0.0)))
        Q = new
        history.append(Q.copy())
        if delta < tol:
            return TreeQ(n_leaves, Q, it, history)
    raise NonConvergence(f"tree value iteration did not converge in {max_iter} sweeps")


def play_tree_greedy(tq: TreeQ, gold: int) -> float:
    """Execute the greedy policy for one episode against a known gold leaf; returns the reward sum."""
    n_leaves = tq.n_leaves
    subset = (1 << n_leaves) - 1
    node, total = 0, 0.0
    while True:
        a = tq.greedy(node, subset)
        if a == S:
            total -= SENSE_COST
            subset = 1 << gold
            continue
        child = 2 * node + 1 + a
        if child >= n_leaves - 1:
            return total + (GOLD if child - (n_leaves - 1) == gold else TIGER)
        node = child


# ---------------------------------------------------------------- generic latent MDP VI

@dataclass
class LatentDiscreteMDP:
    """Finite latent MDP; the next state is the only observation.

    T: (k, S, A, S) transitions per hypothesis; R: (k, S, A, S) rewards;
    terminal: (S,) absorbing zero-value states; valid: (S, A) admissible actions.
    """

    T: np.ndarray
    R: np.ndarray
    prior: np.ndarray
    gamma: float = 1.0
    terminal: np.ndarray | None = None
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        k, n_s, n_a, _ = self.T.shape
        self.prior = np.asarray(self.prior, dtype=float)
        self.terminal = np.zeros(n_s, dtype=bool) if self.terminal is None else np.asarray(self.terminal, bool)
        self.valid = np.ones((n_s, n_a), dtype=bool) if self.valid is None else np.asarray(self.valid, bool)


def simplex_grid(k: int, resolution: int) -> np.ndarray:
    """All k-vectors with entries in {0, 1/m, ..., 1} summing to one (m = ``resolution``)."""
    pts = []
    for bars in itertools.combinations(range(resolution + k - 1), k - 1):
        edges = (-1, *bars, resolution + k - 1)
        pts.append([edges[i + 1] - edges[i] - 1 for i in range(k)])
    return np.array(pts, dtype=float) / resolution


def snap(beliefs, grid) -> np.ndarray:
    """Index of the nearest grid point (Euclidean) for each belief row.

    The grid is the scaled simplex lattice, whose closest point is found exactly by
    rounding m * b down and handing the leftover units to the largest remainders.
    """
    beliefs = np.atleast_2d(np.asarray(beliefs, dtype=float))
    m = int(round(1.0 / grid[grid > 0].min()))
    scaled = beliefs * m
    base = np.floor(scaled)
    rem = scaled - base
    short = (m - base.sum(axis=1)).round().astype(int)
    order = np.argsort(-rem, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(beliefs.shape[1])[None].repeat(len(beliefs), 0), axis=1)
    counts = (base + (ranks < short[:, None])).astype(np.int64)
    return _grid_lookup(grid, m)(counts)


def _grid_lookup(grid, m):
    radix = (m + 1) ** np.arange(grid.shape[1])
    codes = (np.rint(grid * m).astype(np.int64) * radix).sum(axis=1)
    order = np.argsort(codes)
    sorted_codes = codes[order]

    def lookup(counts):
        return order[np.searchsorted(sorted_codes, (counts * radix).sum(axis=1))]

    return lookup


@dataclass
class BeliefQ:
    grid: np.ndarray
    Q: np.ndarray  # (S, G, A)
    iterations: int

    def q(self, s: int, belief) -> np.ndarray:
        return self.Q[s, snap(np.atleast_2d(belief), self.grid)[0]]

    def greedy(self, s: int, belief) -> int:
        return int(np.argmax(self.q(s, belief)))


def belief_value_iteration(mdp: LatentDiscreteMDP, resolution: int = 20, tol: float = 1e-10,
                           max_iter: int = 10_000) -> BeliefQ:
    """Q(s, b, a) on a simplex grid; successor beliefs are snapped to the nearest grid point.

    Exact whenever every reachable belief lies on the grid.
    """
    k, n_s, n_a, _ = mdp.T.shape
    grid = simplex_grid(k, resolution)
    G = len(grid)
    # expected reward and successor tables, computed once
    # joint[g, s, a, s'] = sum_i b_i T_i(s'|s,a)
    joint = np.einsum("gi,isat->gsat", grid, mdp.T)
    rew = np.einsum("gi,isat->gsa", grid, mdp.T * mdp.R)
    nxt_idx = np.zeros((G, n_s, n_a, n_s), dtype=int)
    for s in range(n_s):
        for a in range(n_a):
            post = grid[:, :, None] * mdp.T[:, s, a, :][None]  # (G, k, S')
            norm = post.sum(axis=1, keepdims=True)
            post = np.where(norm > 0, post / np.where(norm > 0, norm, 1), grid[:, :, None])
            nxt_idx[:, s, a, :] = snap(post.transpose(0, 2, 1).reshape(-1, k), grid).reshape(G, n_s)
    invalid = ~mdp.valid
    Q = np.zeros((n_s, G, n_a))
    for it in range(1, max_iter + 1):
        V = np.where(invalid[:, None, :], -np.inf, Q).max(axis=2)
        V[mdp.terminal] = 0.0
        Vn = V[np.arange(n_s)[None, None, None, :], nxt_idx]  # (G, S, A, S')
        new = (rew + mdp.gamma * (joint * Vn).sum(axis=3)).transpose(1, 0, 2)
        new[mdp.terminal] = 0.0
        new = np.where(invalid[:, None, :], -np.inf, new)
        delta = np.max(np.abs(np.where(np.isfinite(new), new - np.where(np.isfinite(Q), Q, 0), 0)))
        Q = new
        if delta < tol:
            return BeliefQ(grid, Q, it)
    raise NonConvergence(f"belief value iteration did not converge in {max_iter} sweeps")


def tree_as_latent_mdp(n_leaves: int) -> tuple[LatentDiscreteMDP, dict]:
    """Tree MDP in the generic format. Sensing moves to a root copy tagged with the gold leaf.

    States: internal nodes 0..N-2 (heap order), sensed-root copies, then leaves.
    """
    _check_leaves(n_leaves)
    n_int = n_leaves - 1
    sensed0 = n_int
    leaf0 = n_int + n_leaves
    n_s = leaf0 + n_leaves
    trans = np.zeros((n_leaves, n_s, 3, n_s))
    rew = np.zeros_like(trans)
    valid = np.zeros((n_s, 3), dtype=bool)
    terminal = np.zeros(n_s, dtype=bool)
    terminal[leaf0:] = True

    def node_of(s):
        return 0 if sensed0 <= s < leaf0 else s

    for g in range(n_leaves):
        for s in range(n_s):
            if terminal[s]:
                trans[g, s, :, s] = 1.0
                continue
            node = node_of(s)
            for a in (L, R):
                valid[s, a] = True
                child = 2 * node + 1 + a
                target = child if child < n_int else leaf0 + (child - n_int)
                trans[g, s, a, target] = 1.0
                if target >= leaf0:
                    rew[g, s, a, target] = GOLD if target - leaf0 == g else TIGER
            if s == 0:
                valid[s, S] = True
                trans[g, s, S, sensed0 + g] = 1.0
                rew[g, s, S, sensed0 + g] = -SENSE_COST
            else:
                trans[g, s, S, s] = 1.0  # masked out by ``valid``
    valid[terminal] = True
    mdp = LatentDiscreteMDP(trans, rew, np.full(n_leaves, 1.0 / n_leaves), 1.0, terminal, valid)
    return mdp, {"root": 0, "sensed": sensed0, "leaf": leaf0}


# ---------------------------------------------------------------- sequence probabilities

@dataclass
class DiscreteMDP:
    P0: np.ndarray  # (S,)
    T: np.ndarray  # (S, A, S)

    @property
    def n_states(self) -> int:
        return len(self.P0)

    @property
    def n_actions(self) -> int:
        return self.T.shape[1]


def random_discrete_mdp(rng, n_states: int = 3, n_actions: int = 2) -> DiscreteMDP:
    P0 = rng.dirichlet(np.ones(n_states))
    T = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    return DiscreteMDP(P0, T)


def mixture_table(pi_e, pi_r) -> np.ndarray:
    """pi(a|s) = sum_{a_r} pi_r(a_r|s) pi_e(a - a_r|s), actions added modulo |A|."""
    pi_e = np.asarray(pi_e, dtype=float)
    pi_r = np.asarray(pi_r, dtype=float)
    n_a = pi_e.shape[1]
    out = np.zeros_like(pi_e)
    for a in range(n_a):
        for a_r in range(n_a):
            out[:, a] += pi_r[:, a_r] * pi_e[:, (a - a_r) % n_a]
    return out


def enumerate_sequence_probability(mdp: DiscreteMDP, policy_pair, xi) -> tuple[float, float]:
    """P(xi) under (mixture policy on M) and (residual policy on M_r).

    ``policy_pair = (pi_e, pi_r)`` are (S, A) tables. The first route sums over every
    executed-action sequence; the second sums over residual actions through T_r.
    """
    pi_e, pi_r = (np.asarray(p, dtype=float) for p in policy_pair)
    xi = [int(s) for s in xi]
    n_a = mdp.n_actions
    # route 1: enumerate (a_e, a_r) pairs explicitly on the original MDP
    p_orig = mdp.P0[xi[0]]
    for s, s_next in zip(xi[:-1], xi[1:]):
        step = 0.0
        for a_e in range(n_a):
            for a_r in range(n_a):
                step += pi_e[s, a_e] * pi_r[s, a_r] * mdp.T[s, (a_e + a_r) % n_a, s_next]
        p_orig *= step
    # route 2: residual policy acting in M_r
    T_r = residual_transition_matrix(mdp.T, pi_e)
    p_res = mdp.P0[xi[0]]
    for s, s_next in zip(xi[:-1], xi[1:]):
        p_res *= float(pi_r[s] @ T_r[s, :, s_next])
    return float(p_orig), float(p_res)


def all_sequences(n_states: int, length: int):
    return itertools.product(range(n_states), repeat=length)
