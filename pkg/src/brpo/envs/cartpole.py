"""Cart-pole with latent cart mass and pole length.

The true (mass, length) is drawn uniformly from [0.5, 2.0] kg x [0.5, 2.0] m. The
filter tracks a 3 x 3 grid over that square; hypothesis ``3 * i + j`` is the cell
with mass bin ``i`` and length bin ``j`` and is represented by the cell centre.
"""
from __future__ import annotations

import numpy as np

from .base import EnvSpec, LatentEnv, Latents, StepBatch

GRAVITY = 9.8
POLE_MASS = 0.1
DT = 0.02
FORCE_BOUND = 10.0
NOISE_STD = 0.1 * FORCE_BOUND
THETA_LIMIT = 1.2
X_LIMIT = 4.0
LATENT_LOW, LATENT_HIGH = 0.5, 2.0
GRID = 3
# isotropic slack added to the propagated force-noise covariance; absorbs the
# mismatch between the true parameters and the grid-centre hypotheses
MODEL_STD = 0.01

_edges = np.linspace(LATENT_LOW, LATENT_HIGH, GRID + 1)
CELL_CENTERS = 0.5 * (_edges[:-1] + _edges[1:])
GRID_PARAMS = np.array([(m, l) for m in CELL_CENTERS for l in CELL_CENTERS])


def derivatives(state, force, mass, length):
    """Continuous-time cart-pole dynamics; ``length`` is the full pole length."""
    x_dot, theta, theta_dot = state[..., 1], state[..., 2], state[..., 3]
    half = 0.5 * length
    total = mass + POLE_MASS
    sin, cos = np.sin(theta), np.cos(theta)
    temp = (force + POLE_MASS * half * theta_dot ** 2 * sin) / total
    theta_acc = (GRAVITY * sin - cos * temp) / (half * (4.0 / 3.0 - POLE_MASS * cos ** 2 / total))
    x_acc = temp - POLE_MASS * half * theta_acc * cos / total
    return np.stack([x_dot, x_acc, theta_dot, theta_acc], axis=-1)


def rk4_step(state, force, mass, length, dt=DT):
    k1 = derivatives(state, force, mass, length)
    k2 = derivatives(state + 0.5 * dt * k1, force, mass, length)
    k3 = derivatives(state + 0.5 * dt * k2, force, mass, length)
    k4 = derivatives(state + dt * k3, force, mass, length)
    return state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def linearize(mass, length, eps=1e-6):
    """Jacobians (A, B) of the discrete RK4 map at the upright equilibrium (central differences)."""
    x0 = np.zeros(4)
    A = np.zeros((4, 4))
    for i in range(4):
        e = np.zeros(4)
        e[i] = eps
        A[:, i] = (rk4_step(x0 + e, 0.0, mass, length) - rk4_step(x0 - e, 0.0, mass, length)) / (2 * eps)
    B = ((rk4_step(x0, eps, mass, length) - rk4_step(x0, -eps, mass, length)) / (2 * eps))[:, None]
    return A, B


def grid_index(params) -> np.ndarray:
    params = np.atleast_2d(params)
    bins = np.clip(np.searchsorted(_edges, params, side="right") - 1, 0, GRID - 1)
    return bins[:, 0] * GRID + bins[:, 1]


class CartpoleEnv(LatentEnv):
    sense_index = None

    def __init__(self, horizon: int = 500, noise_std: float = NOISE_STD):
        self.noise_std = noise_std
        self.spec = EnvSpec("cartpole", state_dim=4, action_dim=1, horizon=horizon, discount=0.99,
                            latent_support=tuple(f"m={m:.2f},l={l:.2f}" for m, l in GRID_PARAMS))
        self.action_low = np.array([-FORCE_BOUND])
        self.action_high = np.array([FORCE_BOUND])
        self.latent_params = GRID_PARAMS.copy()

    def reset(self, rng, n):
        params = rng.uniform(LATENT_LOW, LATENT_HIGH, size=(n, 2))
        states = rng.uniform(-0.05, 0.05, size=(n, 4))
        return states, Latents(grid_index(params), params)

    def step(self, states, latents, actions, rng):
        states = np.asarray(states, dtype=float)
        params = np.asarray(latents.params, dtype=float)
        force = np.clip(np.asarray(actions, dtype=float)[:, 0], -FORCE_BOUND, FORCE_BOUND)
        if self.noise_std > 0:
            force = force + self.noise_std * rng.standard_normal(len(states))
        nxt = rk4_step(states, force, params[:, 0], params[:, 1])
        failed = (np.abs(nxt[:, 2]) > THETA_LIMIT) | (np.abs(nxt[:, 0]) > X_LIMIT)
        rewards = np.where(failed, 0.0, 1.0)
        info = {"reached_goal": np.zeros(len(states), dtype=bool), "crashed": failed,
                "sensed": np.zeros(len(states), dtype=bool)}
        return StepBatch(nxt, rewards, failed.copy(), nxt.copy(), info)

    def predict(self, states, actions):
        """Noise-free next state under every grid hypothesis, shape (n, 9, 4), and d(next)/d(force)."""
        states = np.asarray(states, dtype=float)
        force = np.clip(np.asarray(actions, dtype=float)[:, 0], -FORCE_BOUND, FORCE_BOUND)
        s = np.repeat(states[:, None, :], len(GRID_PARAMS), axis=1)
        f = force[:, None]
        m, l = GRID_PARAMS[None, :, 0], GRID_PARAMS[None, :, 1]
        mean = rk4_step(s, f, m, l)
        eps = 1e-4
        grad = (rk4_step(s, f + eps, m, l) - rk4_step(s, f - eps, m, l)) / (2 * eps)
        return mean, grad

    def log_likelihood(self, states, actions, next_states, observations):
        mean, grad = self.predict(states, actions)
        resid = np.asarray(observations, dtype=float)[:, None, :] - mean
        cov = (self.noise_std ** 2) * grad[..., :, None] * grad[..., None, :] + MODEL_STD ** 2 * np.eye(4)
        sign, logdet = np.linalg.slogdet(cov)
        maha = np.einsum("nki,nki->nk", resid, np.linalg.solve(cov, resid[..., None])[..., 0])
        return -0.5 * (maha + logdet + 4 * np.log(2 * np.pi))

    def features(self, states):
        states = np.asarray(states, dtype=float)
        return states / np.array([X_LIMIT / 2, 2.0, THETA_LIMIT / 2, 2.0])
