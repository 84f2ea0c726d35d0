"""Deterministic binary tree with one gold leaf and a costly sense action at the root.

Nodes are ``(depth, index)`` with the root at ``(0, 0)`` and leaves at depth ``d``.
The latent is the gold leaf. Discrete actions are L=0, R=1, S=2; the continuous
interface used by residual learning encodes them as ``(move, sense)`` where a
positive sense channel at the root means S and otherwise the sign of ``move``
picks the branch.
"""
from __future__ import annotations

import numpy as np

from .base import EnvSpec, IllegalAction, LatentEnv, Latents, StepBatch, StepResult

LEFT, RIGHT, SENSE = 0, 1, 2

GOLD_REWARD = 100.0
TIGER_REWARD = -10.0
SENSE_REWARD = -0.1

# observation layout
OBS_SENSED, OBS_GOLD, OBS_LEAF, OBS_FOUND = 0, 1, 2, 3


class TreeEnv(LatentEnv):
    sense_index = 1

    def __init__(self, depth: int = 2, horizon: int | None = None):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.depth = depth
        self.n_leaves = 2 ** depth
        self.spec = EnvSpec(
            name=f"tree{self.n_leaves}",
            state_dim=2,
            action_dim=2,
            horizon=horizon if horizon is not None else 2 * depth + 2,
            discount=1.0,
            latent_support=tuple(f"gold@{j}" for j in range(self.n_leaves)),
        )
        self.action_low = np.full(2, -np.inf)
        self.action_high = np.full(2, np.inf)
        self.latent_params = np.arange(self.n_leaves, dtype=float)[:, None]

    def reset(self, rng, n):
        gold = rng.integers(self.n_leaves, size=n)
        return np.zeros((n, 2)), Latents(gold, gold[:, None].astype(float))

    def decode(self, states, actions) -> np.ndarray:
        """Map continuous (move, sense) actions to discrete L/R/S."""
        actions = np.asarray(actions, dtype=float)
        at_root = states[:, 0] == 0
        discrete = np.where(actions[:, 0] < 0, LEFT, RIGHT)
        return np.where(at_root & (actions[:, 1] > 0), SENSE, discrete)

    def step_discrete(self, states, latents: Latents, discrete) -> StepBatch:
        states = np.asarray(states, dtype=float)
        discrete = np.asarray(discrete, dtype=int)
        n = len(states)
        depth = states[:, 0].astype(int)
        index = states[:, 1].astype(int)
        if np.any(depth >= self.depth):
            raise IllegalAction("episode already terminated at a leaf")
        sensing = discrete == SENSE
        if np.any(sensing & (depth != 0)):
            raise IllegalAction("sense is only available at the root")
        gold = np.asarray(latents.index, dtype=int)

        new_depth = np.where(sensing, depth, depth + 1)
        new_index = np.where(sensing, index, 2 * index + (discrete == RIGHT))
        at_leaf = new_depth == self.depth
        found = at_leaf & (new_index == gold)

        rewards = np.zeros(n)
        rewards[sensing] = SENSE_REWARD
        rewards[at_leaf] = np.where(found[at_leaf], GOLD_REWARD, TIGER_REWARD)

        obs = np.full((n, 4), -1.0)
        obs[:, OBS_SENSED] = sensing
        obs[sensing, OBS_GOLD] = gold[sensing]
        obs[:, OBS_LEAF] = np.where(at_leaf, new_index, -1)
        obs[:, OBS_FOUND] = np.where(at_leaf, found, -1)
        next_states = np.stack([new_depth, new_index], axis=1).astype(float)
        info = {"sensed": sensing, "reached_goal": found, "crashed": at_leaf & ~found}
        return StepBatch(next_states, rewards, at_leaf.copy(), obs, info)

    def step(self, states, latents, actions, rng=None):
        return self.step_discrete(states, latents, self.decode(states, actions))

    def log_likelihood(self, states, actions, next_states, observations):
        obs = np.asarray(observations, dtype=float)
        leaves = np.arange(self.n_leaves)[None, :]
        ok = np.ones((len(obs), self.n_leaves), dtype=bool)
        sensed = obs[:, OBS_SENSED] > 0
        ok[sensed] = leaves == obs[sensed, OBS_GOLD][:, None]
        at_leaf = obs[:, OBS_LEAF] >= 0
        found = at_leaf & (obs[:, OBS_FOUND] > 0)
        missed = at_leaf & ~found
        ok[found] &= leaves == obs[found, OBS_LEAF][:, None]
        ok[missed] &= leaves != obs[missed, OBS_LEAF][:, None]
        with np.errstate(divide="ignore"):
            return np.log(ok.astype(float))

    def features(self, states):
        states = np.asarray(states, dtype=float)
        depth = states[:, 0]
        width = 2.0 ** depth
        pos = np.where(depth > 0, (states[:, 1] + 0.5) / width * 2 - 1, 0.0)
        return np.stack([(depth == 0).astype(float), depth / self.depth, pos], axis=1)

    def leaf_path(self, leaf: int) -> list[int]:
        """Discrete action sequence from the root to ``leaf``."""
        bits = [(leaf >> (self.depth - 1 - i)) & 1 for i in range(self.depth)]
        return [RIGHT if b else LEFT for b in bits]


def tree_step(env: TreeEnv, state, latent, action: int) -> StepResult:
    """Single-episode discrete step (L=0, R=1, S=2)."""
    lat = Latents(np.array([latent.index]), np.array([[float(latent.index)]]))
    out = env.step_discrete(np.asarray(state, dtype=float)[None], lat, np.array([action]))
    return out.single(0)
