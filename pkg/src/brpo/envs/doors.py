"""Doors: a point agent must pass a wall made of four doors, each independently open.

Geometry (units are metres, one step moves at most one unit):

* the room spans x in [-4, 4], y >= 0; the agent starts on y = 0 with x in [-2, 2];
* the door wall lies on y = 10 and is tiled by four doors of width 2 centred at
  x = -3, -1, 1, 3;
* the goal is any point with y >= 11.

Latent hypothesis ``c`` in 0..15 encodes the door configuration: door ``j`` is
open iff bit ``j`` of ``c`` is set.
"""
from __future__ import annotations

import numpy as np

from ..belief import normalize_rows
from .base import EnvSpec, LatentEnv, Latents, StepBatch

N_DOORS = 4
X_MIN, X_MAX = -4.0, 4.0
WALL_Y = 10.0
GOAL_Y = 11.0
DOOR_CENTERS = np.array([-3.0, -1.0, 1.0, 3.0])
DOOR_HALF_WIDTH = 1.0
SPEED_CAP = 1.0
PUSHBACK = 0.5
SENSE_DECAY = 0.5  # lambda in p(d) = 0.5 + 0.5 exp(-lambda d)

GOAL_REWARD = 100.0
CRASH_REWARD = -10.0
SENSE_REWARD = -1.0

CONFIGS = ((np.arange(16)[:, None] >> np.arange(N_DOORS)[None, :]) & 1).astype(float)

# observation layout: sensed flag, four door bits, crashed door, passed door
OBS_SENSED = 0
OBS_BITS = slice(1, 5)
OBS_CRASH = 5
OBS_PASS = 6


def sense_accuracy(dist):
    return 0.5 + 0.5 * np.exp(-SENSE_DECAY * np.asarray(dist, dtype=float))


def door_distances(positions) -> np.ndarray:
    """Distance from each position to each door centre, shape (n, 4)."""
    positions = np.atleast_2d(positions)
    dx = positions[:, 0:1] - DOOR_CENTERS[None, :]
    dy = positions[:, 1:2] - WALL_Y
    return np.hypot(dx, dy)


def door_at(x) -> np.ndarray:
    return np.clip(np.floor((np.asarray(x) - X_MIN) / (2 * DOOR_HALF_WIDTH)), 0, N_DOORS - 1).astype(int)


def cap_speed(v, cap=SPEED_CAP):
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v * np.minimum(1.0, cap / np.maximum(norm, 1e-12))


class DoorsEnv(LatentEnv):
    sense_index = 2

    def __init__(self, horizon: int = 300):
        self.spec = EnvSpec("doors", state_dim=4, action_dim=3, horizon=horizon, discount=0.99,
                            latent_support=tuple(f"open={''.join(str(int(b)) for b in c)}" for c in CONFIGS))
        self.action_low = np.array([-2.0, -2.0, -np.inf])
        self.action_high = np.array([2.0, 2.0, np.inf])
        self.latent_params = CONFIGS.copy()

    def reset(self, rng, n):
        open_bits = (rng.random((n, N_DOORS)) < 0.5).astype(float)
        index = (open_bits * (1 << np.arange(N_DOORS))).sum(axis=1).astype(int)
        states = np.zeros((n, 4))
        states[:, 0] = rng.uniform(-2.0, 2.0, size=n)
        return states, Latents(index, open_bits)

    def step(self, states, latents, actions, rng):
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float)
        n = len(states)
        open_bits = np.asarray(latents.params, dtype=float)
        pos = states[:, :2]
        vel = cap_speed(actions[:, :2])
        new = pos + vel
        new[:, 0] = np.clip(new[:, 0], X_MIN, X_MAX)
        new[:, 1] = np.maximum(new[:, 1], 0.0)

        below, now_below = pos[:, 1] < WALL_Y, new[:, 1] < WALL_Y
        crossing = below != now_below
        frac = np.where(crossing, (WALL_Y - pos[:, 1]) / np.where(crossing, new[:, 1] - pos[:, 1], 1.0), 0.0)
        x_cross = pos[:, 0] + frac * (new[:, 0] - pos[:, 0])
        door = door_at(x_cross)
        door_open = open_bits[np.arange(n), door] > 0
        crash = crossing & ~door_open
        passed = crossing & door_open

        side = np.where(below, WALL_Y - PUSHBACK, WALL_Y + PUSHBACK)
        new[crash, 0] = x_cross[crash]
        new[crash, 1] = side[crash]
        vel = np.where(crash[:, None], 0.0, new - pos)

        rewards = np.zeros(n)
        rewards[crash] += CRASH_REWARD
        sensed = actions[:, 2] > 0
        rewards[sensed] += SENSE_REWARD
        reached = new[:, 1] >= GOAL_Y
        rewards[reached] += GOAL_REWARD

        obs = np.full((n, 7), -1.0)
        obs[:, OBS_SENSED] = sensed
        acc = sense_accuracy(door_distances(new))
        correct = rng.random((n, N_DOORS)) < np.where(sensed[:, None], acc, 0.5)
        obs[:, OBS_BITS] = np.where(correct, open_bits, 1.0 - open_bits)
        obs[crash, OBS_CRASH] = door[crash]
        obs[passed, OBS_PASS] = door[passed]

        next_states = np.concatenate([new, vel], axis=1)
        info = {
            "crashed": np.where(crash, door, -1),
            "reached_goal": reached,
            "sensed": sensed,
        }
        return StepBatch(next_states, rewards, reached.copy(), obs, info)

    def door_log_likelihood(self, next_states, observations) -> np.ndarray:
        """Per-door log-likelihoods, shape (n, 4, 2): last axis is (closed, open)."""
        obs = np.asarray(observations, dtype=float)
        n = len(obs)
        sensed = obs[:, OBS_SENSED] > 0
        acc = np.where(sensed[:, None], sense_accuracy(door_distances(np.asarray(next_states)[:, :2])), 0.5)
        bits = obs[:, OBS_BITS]
        status = np.array([0.0, 1.0])
        lik = np.where(bits[:, :, None] == status[None, None, :], acc[:, :, None], 1.0 - acc[:, :, None])
        rows = np.arange(n)
        crash = obs[:, OBS_CRASH] >= 0
        lik[rows[crash], obs[crash, OBS_CRASH].astype(int), 1] = 0.0
        passed = obs[:, OBS_PASS] >= 0
        lik[rows[passed], obs[passed, OBS_PASS].astype(int), 0] = 0.0
        with np.errstate(divide="ignore"):
            return np.log(lik)

    def log_likelihood(self, states, actions, next_states, observations):
        per_door = self.door_log_likelihood(next_states, observations)
        cfg = CONFIGS.astype(int)
        # sum over doors of log p(obs_j | status_j(c))
        return per_door[:, np.arange(N_DOORS)[None, :], cfg].sum(axis=2)

    def features(self, states):
        states = np.asarray(states, dtype=float)
        return np.stack([
            states[:, 0] / X_MAX,
            (states[:, 1] - WALL_Y / 2) / (WALL_Y / 2),
            states[:, 2],
            states[:, 3],
            (states[:, 1] >= WALL_Y).astype(float),
        ], axis=1)

    def positions(self, states):
        return np.asarray(states, dtype=float)[:, :2]


class DoorsFilter:
    """Exact factored filter: four Bernoulli marginals P(door open), expanded to 16 on demand.

    Doors are a priori independent and every observation factorises per door, so
    the product of marginals equals the joint posterior.
    """

    def __init__(self, env: DoorsEnv):
        self.env = env

    def init(self, n: int) -> np.ndarray:
        return np.full((n, N_DOORS), 0.5)

    def update(self, fstate, states, actions, next_states, observations):
        ll = self.env.door_log_likelihood(next_states, observations)
        lik = np.exp(ll - ll.max(axis=2, keepdims=True))
        weights = np.stack([1.0 - fstate, fstate], axis=2) * lik
        return normalize_rows(weights)[:, :, 1]

    def probs(self, fstate) -> np.ndarray:
        m = np.asarray(fstate)[:, None, :]
        return np.prod(np.where(CONFIGS[None] > 0, m, 1.0 - m), axis=2)
