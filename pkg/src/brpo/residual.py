"""The residual belief MDP induced by a fixed ensemble, and rollouts of residual policies in it.

Rollouts are batched: ``collect`` advances ``n`` episodes together, dropping each
episode from the active set once it terminates. ``simulate`` is the one-episode
view that returns a :class:`Trajectory`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .belief import BeliefState, CategoricalBelief, entropy, l1_distance


class DimensionMismatch(ValueError):
    pass


class NotEnumerable(TypeError):
    pass


def mixture_action(ensemble_sample, residual_sample, low=None, high=None):
    """a = clip(a_e + a_r, low, high). Returns the action and a per-row flag marking clipping."""
    a_e = np.asarray(ensemble_sample, dtype=float)
    a_r = np.asarray(residual_sample, dtype=float)
    if a_e.shape != a_r.shape:
        raise DimensionMismatch(f"ensemble action {a_e.shape} vs residual action {a_r.shape}")
    raw = a_e + a_r
    if low is None and high is None:
        return raw, np.zeros(raw.shape[:-1], dtype=bool) if raw.ndim else False
    lo = -np.inf if low is None else np.asarray(low, dtype=float)
    hi = np.inf if high is None else np.asarray(high, dtype=float)
    out = np.clip(raw, lo, hi)
    clipped = np.any(out != raw, axis=-1)
    return out, clipped


@dataclass
class Trajectory:
    states: list
    residual_actions: np.ndarray
    executed_actions: np.ndarray
    rewards: np.ndarray
    ensemble_means: np.ndarray
    done_step: int | None = None

    def __len__(self):
        return len(self.rewards)

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())

    def to_jsonl(self, path) -> None:
        """Write one JSON record per step: step, state, belief, a_e, a_r, reward, done."""
        with open(path, "w") as fh:
            for t in range(len(self.rewards)):
                rec = {
                    "step": t,
                    "state": self.states[t].env_state.tolist(),
                    "belief": self.states[t].belief.probs.tolist(),
                    "a_e": self.ensemble_means[t].tolist(),
                    "a_r": self.residual_actions[t].tolist(),
                    "reward": float(self.rewards[t]),
                    "done": self.done_step == t,
                }
                fh.write(json.dumps(rec) + "\n")


@dataclass
class RolloutBatch:
    """Padded per-step arrays of shape (T, n, ...); ``mask[t, i]`` marks real steps."""

    inputs: np.ndarray
    residual_actions: np.ndarray
    executed_actions: np.ndarray
    ensemble_actions: np.ndarray
    log_probs: np.ndarray
    means: np.ndarray
    rewards: np.ndarray
    env_rewards: np.ndarray
    mask: np.ndarray
    dones: np.ndarray
    clipped: np.ndarray
    sensed: np.ndarray
    states: np.ndarray
    beliefs: np.ndarray
    success: np.ndarray
    crashes: np.ndarray
    log_std: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_episodes(self) -> int:
        return self.mask.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=0)

    @property
    def returns(self) -> np.ndarray:
        """Undiscounted environment return per episode (without any bonus)."""
        return (self.env_rewards * self.mask).sum(axis=0)

    @property
    def env_steps(self) -> int:
        return int(self.mask.sum())

    def final_beliefs(self) -> np.ndarray:
        return self.beliefs[self.lengths, np.arange(self.n_episodes)]

    def final_entropy(self) -> np.ndarray:
        return entropy(self.final_beliefs())

    def trajectory(self, i: int = 0) -> Trajectory:
        length = int(self.lengths[i])
        states = [BeliefState(self.states[t, i].copy(), CategoricalBelief(self.beliefs[t, i]))
                  for t in range(length + 1)]
        done = self.dones[:length, i]
        return Trajectory(
            states=states,
            residual_actions=self.residual_actions[:length, i].copy(),
            executed_actions=self.executed_actions[:length, i].copy(),
            rewards=self.env_rewards[:length, i].copy(),
            ensemble_means=self.ensemble_actions[:length, i].copy(),
            done_step=int(np.flatnonzero(done)[0]) if done.any() else None,
        )


def collect(env, ensemble, policy, filt, n: int, horizon: int, rng, *, deterministic: bool = False,
            bonus_epsilon: float = 0.0, init=None) -> RolloutBatch:
    """Run ``n`` episodes of the mixture policy a_e + a_r (batched simulation).

    ``policy`` must provide ``build_input(features, beliefs, a_e)``, ``sample(x, rng, deterministic)``
    returning ``(a_r, log_prob, mean)``. ``init`` optionally supplies ``(states, latents)``.
    """
    if horizon > env.spec.horizon:
        raise ValueError(f"horizon {horizon} exceeds the environment horizon {env.spec.horizon}")
    states, latents = env.reset(rng, n) if init is None else init
    states = np.array(states, dtype=float, copy=True)
    fstate = filt.init(n)
    beliefs0 = filt.probs(fstate)
    A = env.spec.action_dim
    k = beliefs0.shape[1]
    T = horizon
    in_dim = policy.input_dim

    inputs = np.zeros((T, n, in_dim))
    a_res = np.zeros((T, n, A))
    a_exe = np.zeros((T, n, A))
    a_ens = np.zeros((T, n, A))
    mus = np.zeros((T, n, A))
    logp = np.zeros((T, n))
    rewards = np.zeros((T, n))
    env_rewards = np.zeros((T, n))
    mask = np.zeros((T, n), dtype=bool)
    dones = np.zeros((T, n), dtype=bool)
    clipped = np.zeros((T, n), dtype=bool)
    sensed = np.zeros((T, n), dtype=bool)
    crashes = np.zeros((T, n), dtype=bool)
    success = np.zeros(n, dtype=bool)
    all_states = np.zeros((T + 1, n, states.shape[1]))
    all_beliefs = np.zeros((T + 1, n, k))
    all_states[0] = states
    all_beliefs[0] = beliefs0

    active = np.ones(n, dtype=bool)
    for t in range(T):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        s = states[idx]
        b = filt.probs(fstate[idx])
        a_e = ensemble.act(s, b, t, rng)
        x = policy.build_input(env.features(s), b, a_e)
        a_r, lp, mu = policy.sample(x, rng, deterministic)
        a, clip = mixture_action(a_e, a_r, env.action_low, env.action_high)
        out = env.step(s, latents.take(idx), a, rng)
        f_next = filt.update(fstate[idx], s, a, out.next_states, out.observations)
        b_next = filt.probs(f_next)
        r = out.rewards
        shaped = r + bonus_epsilon * l1_distance(b, b_next) if bonus_epsilon else r

        inputs[t, idx] = x
        a_res[t, idx] = a_r
        a_exe[t, idx] = a
        a_ens[t, idx] = a_e
        mus[t, idx] = mu
        logp[t, idx] = lp
        rewards[t, idx] = shaped
        env_rewards[t, idx] = r
        mask[t, idx] = True
        dones[t, idx] = out.dones
        clipped[t, idx] = clip
        sensed[t, idx] = out.info.get("sensed", np.zeros(len(idx), dtype=bool))
        crash = np.asarray(out.info.get("crashed", np.full(len(idx), -1)))
        crashes[t, idx] = crash >= 0 if crash.dtype != bool else crash
        success[idx] |= env.success(out.info) if "reached_goal" in out.info else False

        states[idx] = out.next_states
        fstate[idx] = f_next
        all_states[t + 1] = states
        all_beliefs[t + 1, idx] = b_next
        all_beliefs[t + 1, ~active] = all_beliefs[t, ~active]
        active[idx[out.dones]] = False

    return RolloutBatch(inputs, a_res, a_exe, a_ens, logp, mus, rewards, env_rewards, mask, dones,
                        clipped, sensed, all_states, all_beliefs, success, crashes,
                        log_std=np.array(policy.log_std, copy=True))


def simulate(policy, ensemble, b0, filt, env, horizon: int, seed: int = 0,
             deterministic: bool = False) -> Trajectory:
    """One episode of Simulate: a_e ~ pi_e(s, b); a_r ~ pi_theta(s, b, a_e); execute; filter."""
    rng = np.random.default_rng(seed)
    if b0 is not None:
        prior = np.asarray(getattr(b0, "probs", b0), dtype=float)
        filt = _PriorOverride(filt, prior)
    if horizon == 0:
        states, _ = env.reset(rng, 1)
        belief = CategoricalBelief(filt.probs(filt.init(1))[0])
        return Trajectory([BeliefState(states[0], belief)], np.zeros((0, env.spec.action_dim)),
                          np.zeros((0, env.spec.action_dim)), np.zeros(0), np.zeros((0, env.spec.action_dim)))
    batch = collect(env, ensemble, policy, filt, 1, horizon, rng, deterministic=deterministic)
    return batch.trajectory(0)


class _PriorOverride:
    """Filter wrapper that starts from a caller-supplied categorical prior."""

    def __init__(self, filt, prior):
        self.filt = filt
        self.prior = prior

    def init(self, n):
        from .belief import BayesFilter

        if isinstance(self.filt, BayesFilter):
            return np.tile(self.prior, (n, 1))
        base = self.filt.init(n)
        if not np.allclose(self.filt.probs(base)[0], self.prior):
            raise ValueError("this filter cannot start from an arbitrary categorical prior")
        return base

    def update(self, *args):
        return self.filt.update(*args)

    def probs(self, fstate):
        return self.filt.probs(fstate)


class ResidualBeliefMDP:
    """M_r: the learner picks a_r; the ensemble's a_e is drawn inside the environment.

    The observation exposed to the residual policy is (features, belief, a_e), where
    a_e is the recommendation already drawn for the current state.
    """

    def __init__(self, env, ensemble, filt):
        self.env = env
        self.ensemble = ensemble
        self.filt = filt

    def reset(self, rng, n, init=None):
        states, latents = self.env.reset(rng, n) if init is None else init
        self._states = np.array(states, dtype=float, copy=True)
        self._latents = latents
        self._f = self.filt.init(n)
        self._t = 0
        self._active = np.ones(n, dtype=bool)
        self._a_e = self.ensemble.act(self._states, self.filt.probs(self._f), 0, rng)
        return self.observe()

    def observe(self):
        b = self.filt.probs(self._f)
        return self.env.features(self._states), b, self._a_e

    def step(self, a_r, rng):
        """Apply residual actions to the active episodes; returns rewards and dones for all rows."""
        idx = np.flatnonzero(self._active)
        n = len(self._states)
        rewards = np.zeros(n)
        dones = ~self._active.copy()
        s = self._states[idx]
        a, _ = mixture_action(self._a_e[idx], a_r[idx], self.env.action_low, self.env.action_high)
        out = self.env.step(s, self._latents.take(idx), a, rng)
        self._f[idx] = self.filt.update(self._f[idx], s, a, out.next_states, out.observations)
        self._states[idx] = out.next_states
        rewards[idx] = out.rewards
        dones[idx] = out.dones
        self._active[idx[out.dones]] = False
        self._t += 1
        nxt = np.zeros_like(self._a_e)
        live = np.flatnonzero(self._active)
        if live.size:
            nxt[live] = self.ensemble.act(self._states[live], self.filt.probs(self._f[live]), self._t, rng)
        self._a_e = nxt
        return rewards, dones


class MixturePolicy:
    """pi on the original belief MDP: draws a_e and a_r and returns their (clipped) sum."""

    def __init__(self, ensemble, residual, low=None, high=None):
        self.ensemble = ensemble
        self.residual = residual
        self.low, self.high = low, high

    def act(self, features, states, beliefs, t, rng):
        a_e = self.ensemble.act(states, beliefs, t, rng)
        a_r, _, _ = self.residual.sample(self.residual.build_input(features, beliefs, a_e), rng, False)
        return mixture_action(a_e, a_r, self.low, self.high)[0]


def rollout_residual_view(env, ensemble, filt, policy, n, horizon, rng, init=None) -> np.ndarray:
    """Returns of ``policy`` acting in M_r."""
    mdp = ResidualBeliefMDP(env, ensemble, filt)
    feats, b, a_e = mdp.reset(rng, n, init)
    total = np.zeros(n)
    for _ in range(horizon):
        if not mdp._active.any():
            break
        a_r, _, _ = policy.sample(policy.build_input(feats, b, a_e), rng, False)
        r, _ = mdp.step(a_r, rng)
        total += r
        feats, b, a_e = mdp.observe()
    return total


def rollout_mixture_view(env, ensemble, filt, policy, n, horizon, rng, init=None) -> np.ndarray:
    """Returns of the explicit mixture policy acting in the original belief MDP."""
    mix = MixturePolicy(ensemble, policy, env.action_low, env.action_high)
    states, latents = env.reset(rng, n) if init is None else init
    states = np.array(states, dtype=float, copy=True)
    f = filt.init(n)
    active = np.ones(n, dtype=bool)
    total = np.zeros(n)
    for t in range(horizon):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        s = states[idx]
        b = filt.probs(f[idx])
        a = mix.act(env.features(s), s, b, t, rng)
        out = env.step(s, latents.take(idx), a, rng)
        f[idx] = filt.update(f[idx], s, a, out.next_states, out.observations)
        states[idx] = out.next_states
        total[idx] += out.rewards
        active[idx[out.dones]] = False
    return total


# ---------------------------------------------------------------- discrete residual MDP

def residual_transition_probability(T, ensemble_table, s: int, a_r: int, s_next: int) -> float:
    """T_r(s'|s, a_r) = sum_{a_e} T(s'|s, a_e + a_r) pi_e(a_e|s), actions added modulo |A|.

    ``T`` has shape (S, A, S); ``ensemble_table`` is the (S, A) table pi_e(a_e|s).
    """
    table = _enumerable(ensemble_table)
    T = np.asarray(T, dtype=float)
    n_actions = T.shape[1]
    a_e = np.arange(n_actions)
    return float(np.sum(T[s, (a_e + a_r) % n_actions, s_next] * table[s]))


def residual_transition_matrix(T, ensemble_table) -> np.ndarray:
    """Full T_r array of shape (S, A, S)."""
    table = _enumerable(ensemble_table)
    T = np.asarray(T, dtype=float)
    S, A, _ = T.shape
    out = np.zeros_like(T)
    for a_r in range(A):
        shifted = T[:, (np.arange(A) + a_r) % A, :]
        out[:, a_r, :] = np.einsum("sa,sat->st", table, shifted)
    return out


def _enumerable(table) -> np.ndarray:
    if not isinstance(table, (np.ndarray, list, tuple)):
        raise NotEnumerable("ensemble must be a finite (state x action) probability table")
    arr = np.asarray(table, dtype=float)
    if arr.ndim != 2:
        raise NotEnumerable("ensemble table must be two-dimensional")
    return arr
