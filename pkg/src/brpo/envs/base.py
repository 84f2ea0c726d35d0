"""Shared types for latent MDPs.

Every environment is stepped in batches: arrays carry a leading episode axis so
that many rollouts advance in one numpy call. The single-episode helpers at the
bottom wrap the batched calls with a batch of one.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class IllegalAction(ValueError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    horizon: int
    discount: float
    latent_support: tuple

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if len(self.latent_support) < 1:
            raise ValueError("latent support must be non-empty")

    @property
    def k(self) -> int:
        return len(self.latent_support)


@dataclass(frozen=True)
class LatentSample:
    index: int
    params: np.ndarray


@dataclass
class Latents:
    """Batch of latent draws: hypothesis index plus the environment's true parameters."""

    index: np.ndarray
    params: np.ndarray

    def __len__(self):
        return len(self.index)

    def take(self, idx) -> "Latents":
        return Latents(self.index[idx], self.params[idx])

    def sample(self, i: int) -> LatentSample:
        return LatentSample(int(self.index[i]), self.params[i].copy())


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool
    observation: np.ndarray
    info: dict = field(default_factory=dict)


@dataclass
class StepBatch:
    next_states: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    observations: np.ndarray
    info: dict

    def single(self, i: int = 0) -> StepResult:
        return StepResult(
            self.next_states[i].copy(),
            float(self.rewards[i]),
            bool(self.dones[i]),
            self.observations[i].copy(),
            {key: val[i].item() for key, val in self.info.items()},
        )


class LatentEnv:
    """Base class. Subclasses fill in the batched ``reset``/``step``/``log_likelihood``."""

    spec: EnvSpec
    action_low: np.ndarray
    action_high: np.ndarray
    sense_index: int | None = None
    # per-hypothesis descriptors, shape (k, p); used by UP-MLE inputs
    latent_params: np.ndarray

    @property
    def k(self) -> int:
        return self.spec.k

    @property
    def action_scale(self) -> np.ndarray:
        """Finite per-channel magnitude for normalising actions; unbounded channels use 1."""
        return np.where(np.isfinite(self.action_high), self.action_high, 1.0)

    def prior_probs(self) -> np.ndarray:
        return np.full(self.k, 1.0 / self.k)

    def reset(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, Latents]:
        raise NotImplementedError

    def step(self, states, latents: Latents, actions, rng: np.random.Generator) -> StepBatch:
        raise NotImplementedError

    def log_likelihood(self, states, actions, next_states, observations) -> np.ndarray:
        """Exact log p(s', o | s, a, hypothesis), shape (n, k); -inf marks impossible."""
        raise NotImplementedError

    def likelihood(self, states, actions, next_states, observations) -> np.ndarray:
        return np.exp(self.log_likelihood(states, actions, next_states, observations))

    def features(self, states) -> np.ndarray:
        """Scaled state features fed to policy networks."""
        raise NotImplementedError

    @property
    def feature_dim(self) -> int:
        return self.features(self.reset(np.random.default_rng(0), 1)[0]).shape[1]

    def positions(self, states) -> np.ndarray | None:
        """Planar agent position, when the environment has one (sensing-location histograms)."""
        return None

    def success(self, info: dict) -> np.ndarray:
        return np.asarray(info.get("reached_goal", np.zeros(0, dtype=bool)), dtype=bool)

    # single-episode helpers
    def reset_one(self, seed: int) -> tuple[np.ndarray, LatentSample]:
        states, latents = self.reset(np.random.default_rng(seed), 1)
        return states[0].copy(), latents.sample(0)

    def step_one(self, state, latent: LatentSample, action, rng=None) -> StepResult:
        rng = np.random.default_rng() if rng is None else rng
        lat = Latents(np.array([latent.index]), np.asarray(latent.params, dtype=float)[None])
        out = self.step(np.asarray(state, dtype=float)[None], lat,
                        np.asarray(action, dtype=float).reshape(1, -1), rng)
        return out.single(0)


def env_reset(env: LatentEnv, seed: int) -> tuple[np.ndarray, LatentSample]:
    return env.reset_one(seed)


def observation_likelihood(env: LatentEnv, prev_state, action, next_state, observation,
                           hypothesis_index: int) -> float:
    ll = env.log_likelihood(
        np.asarray(prev_state, dtype=float)[None],
        np.asarray(action, dtype=float).reshape(1, -1),
        np.asarray(next_state, dtype=float)[None],
        np.asarray(observation, dtype=float)[None],
    )
    if not 0 <= hypothesis_index < env.k:
        raise IndexError(hypothesis_index)
    return float(np.exp(ll[0, hypothesis_index]))
