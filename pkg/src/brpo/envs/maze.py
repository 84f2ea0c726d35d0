"""Latent-goal mazes: one of k goals is active; sensing returns a noisy distance to it."""
from __future__ import annotations

import numpy as np

from .base import EnvSpec, LatentEnv, Latents, StepBatch
from .doors import cap_speed
from .layout import MazeLayout, inside_walls, load_layout, segment_hit_fraction

# smallest noise scale used by the filter's density (the simulator's noise vanishes at distance 0)
SIGMA_FLOOR = 1e-3
BACKOFF = 1e-6

OBS_SENSED, OBS_DIST, OBS_GOAL, OBS_ACTIVE = 0, 1, 2, 3


def first_disc_entry(p0, d, centers, radius) -> np.ndarray:
    """Fraction along p0 + s d (s in [0, 1]) where each disc is first touched; inf if never.

    Returns shape (n, k).
    """
    f = p0[:, None, :] - centers[None, :, :]
    a = (d ** 2).sum(axis=1)[:, None]
    b = 2 * (f * d[:, None, :]).sum(axis=2)
    c = (f ** 2).sum(axis=2) - radius ** 2
    disc = b ** 2 - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        root = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2 * a)
        root_far = (-b + np.sqrt(np.maximum(disc, 0.0))) / (2 * a)
    out = np.where((disc >= 0) & (a > 0) & (root_far >= 0) & (root <= 1), np.maximum(root, 0.0), np.inf)
    return np.where(c <= 0, 0.0, out)


class MazeEnv(LatentEnv):
    sense_index = 2

    def __init__(self, layout: MazeLayout | str = "maze4", horizon: int | None = None):
        self.layout = load_layout(layout) if isinstance(layout, str) else layout
        lay = self.layout
        self.goals = lay.goals
        self.n_goals = len(lay.goals)
        self.walls = lay.all_walls
        self.spec = EnvSpec(
            name=lay.name,
            state_dim=4 + self.n_goals,
            action_dim=3,
            horizon=int(horizon if horizon is not None else lay.horizon),
            discount=0.99 if self.n_goals <= 4 else 0.995,
            latent_support=tuple(f"goal{i}" for i in range(self.n_goals)),
        )
        self.action_low = np.array([-2.0, -2.0, -np.inf])
        self.action_high = np.array([2.0, 2.0, np.inf])
        self.latent_params = lay.goals.copy()
        x0, y0, x1, y1 = lay.bounds
        self._center = np.array([(x0 + x1) / 2, (y0 + y1) / 2])
        self._half = np.array([(x1 - x0) / 2, (y1 - y0) / 2])
        self._diag = float(np.hypot(x1 - x0, y1 - y0))

    @property
    def layout_hash(self) -> str:
        return self.layout.hash

    def reset(self, rng, n):
        sx0, sy0, sx1, sy1 = self.layout.start
        states = np.zeros((n, self.spec.state_dim))
        states[:, 0] = rng.uniform(sx0, sx1, size=n)
        states[:, 1] = rng.uniform(sy0, sy1, size=n)
        index = rng.integers(self.n_goals, size=n)
        return states, Latents(index, self.goals[index].copy())

    def move(self, pos, vel):
        """Advance positions, stopping just short of the first wall contact."""
        target = pos + vel
        t = segment_hit_fraction(pos, target, self.walls)
        blocked = np.isfinite(t)
        if np.any(blocked):
            length = np.linalg.norm(vel[blocked], axis=1)
            frac = np.maximum(t[blocked] - BACKOFF / np.maximum(length, 1e-12), 0.0)
            target[blocked] = pos[blocked] + frac[:, None] * vel[blocked]
        return target

    def step(self, states, latents, actions, rng):
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float)
        n = len(states)
        lay = self.layout
        active = np.asarray(latents.index, dtype=int)
        pos = states[:, :2]
        visited = states[:, 4:] > 0
        new = self.move(pos, cap_speed(actions[:, :2], lay.speed_cap))

        s = first_disc_entry(pos, new - pos, self.goals, lay.goal_radius)
        s = np.where(visited, np.inf, s)
        first = np.argmin(s, axis=1)
        touched = np.isfinite(s[np.arange(n), first])
        hit_active = touched & (first == active)
        hit_inactive = touched & ~hit_active

        rewards = np.zeros(n)
        rewards[hit_active] = lay.reward_active
        rewards[hit_inactive] = lay.reward_inactive
        dones = hit_active | (hit_inactive & bool(lay.inactive_terminal))
        new_visited = visited.copy()
        new_visited[np.flatnonzero(hit_inactive), first[hit_inactive]] = True

        sensed = actions[:, 2] > 0
        true_dist = np.linalg.norm(new - self.goals[active], axis=1)
        noisy = true_dist + lay.sense_noise * true_dist * rng.standard_normal(n)
        obs = np.zeros((n, 4))
        obs[:, OBS_SENSED] = sensed
        obs[:, OBS_DIST] = np.where(sensed, noisy, 0.0)
        obs[:, OBS_GOAL] = np.where(touched, first, -1)
        obs[:, OBS_ACTIVE] = hit_active

        next_states = np.concatenate([new, new - pos, new_visited.astype(float)], axis=1)
        info = {"reached_goal": hit_active, "crashed": np.where(hit_inactive, first, -1), "sensed": sensed}
        return StepBatch(next_states, rewards, dones, obs, info)

    def goal_distances(self, positions) -> np.ndarray:
        return np.linalg.norm(np.atleast_2d(positions)[:, None, :] - self.goals[None], axis=2)

    def log_likelihood(self, states, actions, next_states, observations):
        obs = np.asarray(observations, dtype=float)
        n = len(obs)
        ll = np.zeros((n, self.n_goals))
        sensed = obs[:, OBS_SENSED] > 0
        if np.any(sensed):
            d = self.goal_distances(np.asarray(next_states)[sensed, :2])
            sigma = np.maximum(self.layout.sense_noise * d, SIGMA_FLOOR)
            z = (obs[sensed, OBS_DIST][:, None] - d) / sigma
            ll[sensed] = -0.5 * z ** 2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)
        touched = obs[:, OBS_GOAL] >= 0
        if np.any(touched):
            goal = obs[touched, OBS_GOAL].astype(int)[:, None]
            idx = np.arange(self.n_goals)[None, :]
            was_active = obs[touched, OBS_ACTIVE][:, None] > 0
            possible = np.where(was_active, idx == goal, idx != goal)
            ll[touched] = np.where(possible, ll[touched], -np.inf)
        return ll

    def features(self, states):
        states = np.asarray(states, dtype=float)
        pos = (states[:, :2] - self._center) / self._half
        dist = self.goal_distances(states[:, :2]) / self._diag
        return np.concatenate([pos, states[:, 2:4], dist], axis=1)

    def positions(self, states):
        return np.asarray(states, dtype=float)[:, :2]

    def in_free_space(self, positions) -> np.ndarray:
        p = np.atleast_2d(positions)
        x0, y0, x1, y1 = self.layout.bounds
        in_bounds = (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)
        return in_bounds & ~inside_walls(p, self.layout.walls)
