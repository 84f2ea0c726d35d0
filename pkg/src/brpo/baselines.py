"""Comparison agents: BPO and UP-MLE input layouts, the belief-change bonus, and PSRL on the tree."""
from __future__ import annotations

import numpy as np

from .belief import l1_distance, map_index, normalize_rows
from .envs.tree import TreeEnv
from .envs.base import Latents


def bpo_input(state_features, belief) -> np.ndarray:
    """state || belief. Works on single vectors or batches."""
    f = np.asarray(state_features, dtype=float)
    b = np.asarray(belief, dtype=float)
    return np.concatenate([f, b], axis=-1)


def latent_descriptors(params) -> np.ndarray:
    """Rescale each latent-parameter column to [-1, 1] (constant columns map to 0)."""
    params = np.asarray(params, dtype=float)
    lo, hi = params.min(axis=0), params.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.where(hi > lo, 2 * (params - lo) / span - 1, 0.0)


def upmle_input(state_features, belief, descriptors) -> np.ndarray:
    """state || descriptor of the most likely hypothesis (lowest index on ties)."""
    f = np.asarray(state_features, dtype=float)
    idx = map_index(np.asarray(belief, dtype=float))
    return np.concatenate([f, np.asarray(descriptors, dtype=float)[idx]], axis=-1)


def info_bonus(reward, b, b_next, epsilon: float):
    """r + eps * ||b - b'||_1, with the realised next belief standing in for the expectation."""
    if epsilon == 0:
        return reward
    return reward + epsilon * l1_distance(b, b_next)


# ---------------------------------------------------------------- PSRL on the tree

def psrl_episode(posterior, true_latent: int, env: TreeEnv, policies=None, rng=None):
    """One PSRL episode on the tree: sample a leaf, walk to it, update on the outcome.

    ``policies[j]`` is the discrete action list reaching leaf ``j`` (defaults to
    ``env.leaf_path``). The sampled policy never senses. Returns ``(return, posterior)``.
    """
    rng = rng if rng is not None else np.random.default_rng()
    posterior = np.asarray(posterior, dtype=float)
    j = int(rng.choice(len(posterior), p=posterior))
    path = policies[j] if policies is not None else env.leaf_path(j)
    lat = Latents(np.array([true_latent]), np.array([[float(true_latent)]]))
    state = np.zeros((1, 2))
    total = 0.0
    post = posterior[None]
    for a in path:
        out = env.step_discrete(state, lat, np.array([a]))
        actions = np.array([[1.0 if a else -1.0, -1.0]])
        ll = np.exp(env.log_likelihood(state, actions, out.next_states, out.observations))
        post = normalize_rows(post * ll)
        total += float(out.rewards[0])
        state = out.next_states
        if out.dones[0]:
            break
    return total, post[0]


def psrl_tree_returns(n_leaves: int, n_episodes: int, trials: int, rng, per_episode: bool = False):
    """Cumulative PSRL return over ``n_episodes`` for each of ``trials`` independent runs.

    With ``per_episode`` the (trials, n_episodes) matrix of single-episode returns is returned.

    Batched version of repeated :func:`psrl_episode`: each trial keeps a uniform
    posterior over leaves not yet ruled out and samples from it every episode.
    """
    gold = rng.integers(n_leaves, size=trials)
    alive = np.ones((trials, n_leaves), dtype=bool)
    per = np.zeros((trials, n_episodes))
    for ep in range(n_episodes):
        counts = alive.sum(axis=1)
        # choose the r-th surviving leaf, r uniform
        r = (rng.random(trials) * counts).astype(int)
        csum = np.cumsum(alive, axis=1)
        pick = np.argmax(csum > r[:, None], axis=1)
        hit = pick == gold
        per[:, ep] = np.where(hit, 100.0, -10.0)
        alive[~hit, pick[~hit]] = False
        alive[hit] = False
        alive[hit, gold[hit]] = True
    return per if per_episode else per.sum(axis=1)
