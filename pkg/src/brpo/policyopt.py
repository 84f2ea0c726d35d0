"""Gaussian MLP policies, value networks and the PPO clipped-surrogate update, in plain numpy.

Parameters live in a flat ``dict`` of arrays keyed ``pi/W0``, ``pi/b0``, ...,
``log_std``, ``vf/W0``, ... . Gradients are computed by hand-written reverse
mode and checked against central finite differences in the test-suite.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2PI = np.log(2 * np.pi)
CHECKPOINT_VERSION = 1


class NonFiniteGradient(FloatingPointError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass
class PolicyParameters:
    arrays: dict
    input_dim: int
    action_dim: int
    hidden: tuple = (64, 64)
    flags: dict = field(default_factory=dict)

    def copy(self) -> "PolicyParameters":
        return PolicyParameters({k: v.copy() for k, v in self.arrays.items()}, self.input_dim,
                                self.action_dim, tuple(self.hidden), dict(self.flags))

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    @property
    def log_std(self) -> np.ndarray:
        return np.clip(self.arrays["log_std"], LOG_STD_MIN, LOG_STD_MAX)

    def keys(self):
        return list(self.arrays)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in self.keys()])

    def with_flat(self, vec) -> "PolicyParameters":
        out = self.copy()
        i = 0
        for k in self.keys():
            size = out.arrays[k].size
            out.arrays[k] = np.asarray(vec[i:i + size], dtype=float).reshape(out.arrays[k].shape)
            i += size
        return out

    @property
    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in self.keys():
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k], dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


def init_params(input_dim: int, action_dim: int, rng, hidden=(64, 64), log_std: float = -1.0,
                flags: dict | None = None) -> PolicyParameters:
    """Orthogonal-ish scaled Gaussian init; the policy mean head starts at exactly zero."""
    arrays = {}
    for prefix, out_dim in (("pi", action_dim), ("vf", 1)):
        sizes = [input_dim, *hidden, out_dim]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if prefix == "pi" and last:
                W = np.zeros((a, b))
            else:
                scale = 1.0 if last else np.sqrt(1.0 / a)
                W = rng.standard_normal((a, b)) * scale
            arrays[f"{prefix}/W{i}"] = W
            arrays[f"{prefix}/b{i}"] = np.zeros(b)
    arrays["log_std"] = np.full(action_dim, float(log_std))
    return PolicyParameters(arrays, input_dim, action_dim, tuple(hidden), dict(flags or {}))


# ---------------------------------------------------------------- forward / backward

def _mlp_forward(arrays, prefix, x, n_layers):
    acts = [x]
    h = x
    for i in range(n_layers):
        z = h @ arrays[f"{prefix}/W{i}"] + arrays[f"{prefix}/b{i}"]
        h = np.tanh(z) if i < n_layers - 1 else z
        acts.append(h)
    return h, acts


def _mlp_backward(arrays, prefix, acts, dout, n_layers, grads):
    g = dout
    for i in reversed(range(n_layers)):
        h_in = acts[i]
        grads[f"{prefix}/W{i}"] = grads.get(f"{prefix}/W{i}", 0) + h_in.T @ g
        grads[f"{prefix}/b{i}"] = grads.get(f"{prefix}/b{i}", 0) + g.sum(axis=0)
        if i > 0:
            g = (g @ arrays[f"{prefix}/W{i}"].T) * (1.0 - acts[i] ** 2)
    return grads


def _check_input(params, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.input_dim:
        raise DimensionMismatch(f"input width {x.shape[1]} != {params.input_dim}")
    return x


def policy_forward(params: PolicyParameters, x) -> tuple[np.ndarray, np.ndarray]:
    x = _check_input(params, x)
    mean, _ = _mlp_forward(params.arrays, "pi", x, params.n_layers)
    return mean, params.log_std


def value_forward(params: PolicyParameters, x) -> np.ndarray:
    x = _check_input(params, x)
    v, _ = _mlp_forward(params.arrays, "vf", x, params.n_layers)
    return v[:, 0]


def gaussian_log_prob(mean, log_std, action) -> np.ndarray:
    """Diagonal Gaussian log density, summed over the last axis."""
    mean = np.asarray(mean, dtype=float)
    log_std = np.asarray(log_std, dtype=float)
    z = (np.asarray(action, dtype=float) - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z ** 2, axis=-1) - np.sum(log_std * np.ones_like(mean), axis=-1) \
        - 0.5 * mean.shape[-1] * LOG_2PI


def gaussian_kl(mean_old, log_std_old, mean_new, log_std_new) -> np.ndarray:
    """KL(old || new) for diagonal Gaussians, summed over action dimensions."""
    var_old = np.exp(2 * log_std_old)
    var_new = np.exp(2 * log_std_new)
    terms = log_std_new - log_std_old + (var_old + (mean_old - mean_new) ** 2) / (2 * var_new) - 0.5
    return terms.sum(axis=-1)


# ---------------------------------------------------------------- objectives

@dataclass
class UpdateBatch:
    inputs: np.ndarray
    actions: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    old_log_prob: np.ndarray
    old_mean: np.ndarray
    old_log_std: np.ndarray

    def __len__(self):
        return len(self.inputs)

    def take(self, idx) -> "UpdateBatch":
        return UpdateBatch(self.inputs[idx], self.actions[idx], self.advantages[idx], self.returns[idx],
                           self.old_log_prob[idx], self.old_mean[idx], self.old_log_std)


@dataclass
class PPOConfig:
    clip_ratio: float = 0.2
    epochs: int = 10
    minibatch_size: int = 64
    learning_rate: float = 3e-4
    kl_stop: float = 0.03
    entropy_coef: float = 1e-3
    value_coef: float = 0.5
    kl_coef: float = 0.0
    max_grad_norm: float = 0.5


def ppo_loss(params: PolicyParameters, batch: UpdateBatch, cfg: PPOConfig = PPOConfig()):
    """Loss to minimise and its exact gradient.

    loss = -mean(min(rho A, clip(rho) A)) + c_v mean((V - R)^2) - c_H H + beta mean KL(old || new)
    """
    x = batch.inputs
    n = len(x)
    n_layers = params.n_layers
    raw_log_std = params.arrays["log_std"]
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    std_inv = np.exp(-log_std)

    mean, pi_acts = _mlp_forward(params.arrays, "pi", x, n_layers)
    diff = batch.actions - mean
    z = diff * std_inv
    logp = -0.5 * np.sum(z ** 2, axis=1) - log_std.sum() - 0.5 * params.action_dim * LOG_2PI
    ratio = np.exp(logp - batch.old_log_prob)
    adv = batch.advantages
    eps = cfg.clip_ratio
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - eps, 1 + eps) * adv
    surrogate = np.minimum(unclipped, clipped)
    # gradient flows only where the unclipped term is the active minimum
    active = unclipped <= clipped
    d_logp = -(active * unclipped) / n

    v, vf_acts = _mlp_forward(params.arrays, "vf", x, n_layers)
    v = v[:, 0]
    v_err = v - batch.returns
    entropy = np.sum(log_std) + 0.5 * params.action_dim * (1 + LOG_2PI)
    kl = gaussian_kl(batch.old_mean, batch.old_log_std, mean, log_std)

    loss = -surrogate.mean() + cfg.value_coef * np.mean(v_err ** 2) - cfg.entropy_coef * entropy
    if cfg.kl_coef:
        loss += cfg.kl_coef * kl.mean()

    # d logp / d mean = diff / var ; d logp / d log_std = z^2 - 1
    d_mean = d_logp[:, None] * diff * std_inv ** 2
    d_log_std = (d_logp[:, None] * (z ** 2 - 1)).sum(axis=0) - cfg.entropy_coef
    if cfg.kl_coef:
        var_new = std_inv ** -2
        d_mean += cfg.kl_coef / n * (mean - batch.old_mean) / var_new
        var_old = np.exp(2 * batch.old_log_std)
        d_log_std += cfg.kl_coef / n * np.sum(1 - (var_old + (batch.old_mean - mean) ** 2) / var_new, axis=0)
    d_log_std = d_log_std * ((raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX))

    grads = {}
    _mlp_backward(params.arrays, "pi", pi_acts, d_mean, n_layers, grads)
    _mlp_backward(params.arrays, "vf", vf_acts, (2 * cfg.value_coef / n * v_err)[:, None], n_layers, grads)
    grads["log_std"] = d_log_std
    grads = {k: np.asarray(grads[k], dtype=float) for k in params.keys()}
    stats = {
        "policy_loss": float(-surrogate.mean()),
        "value_loss": float(np.mean(v_err ** 2)),
        "entropy": float(entropy),
        "kl": float(kl.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1) > eps)),
    }
    return float(loss), grads, stats


def mse_loss(params: PolicyParameters, batch):
    """Squared error of the policy mean against targets: sum ||mu(x) - y||^2."""
    x, y = batch
    mean, acts = _mlp_forward(params.arrays, "pi", np.atleast_2d(x), params.n_layers)
    err = mean - np.atleast_2d(y)
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    _mlp_backward(params.arrays, "pi", acts, 2 * err, params.n_layers, grads)
    return float(np.sum(err ** 2)), grads, {}


def constant_loss(params, batch):
    return 1.0, {k: np.zeros_like(v) for k, v in params.arrays.items()}, {}


OBJECTIVES = {"ppo": ppo_loss, "mse": mse_loss, "constant": constant_loss}


def gradient(params: PolicyParameters, batch, objective="ppo", **kwargs) -> dict:
    """Exact gradient of a named (or callable) scalar objective, keyed like ``params.arrays``."""
    fn = OBJECTIVES[objective] if isinstance(objective, str) else objective
    _, grads, _ = fn(params, batch, **kwargs)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {k}")
    return grads


def finite_difference_gradient(params: PolicyParameters, batch, objective="ppo", h: float = 1e-5,
                               **kwargs) -> dict:
    """Central differences of the objective value, one coordinate at a time."""
    fn = OBJECTIVES[objective] if isinstance(objective, str) else objective
    base = params.flat()
    out = np.zeros_like(base)
    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[i] += h
        minus[i] -= h
        out[i] = (fn(params.with_flat(plus), batch, **kwargs)[0]
                  - fn(params.with_flat(minus), batch, **kwargs)[0]) / (2 * h)
    grads, i = {}, 0
    for k in params.keys():
        size = params.arrays[k].size
        grads[k] = out[i:i + size].reshape(params.arrays[k].shape)
        i += size
    return grads


def max_relative_error(analytic: dict, numeric: dict, floor: float = 1e-8) -> float:
    worst = 0.0
    for k in analytic:
        a, b = analytic[k].ravel(), numeric[k].ravel()
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)) if a.size else 0.0)
    return worst


# ---------------------------------------------------------------- advantage estimation

def gae(rewards, values, bootstrap_value, gamma: float, lam: float) -> np.ndarray:
    """A_t = sum_l (gamma lam)^l delta_{t+l}; pass ``bootstrap_value=0`` for terminated episodes."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.shape != values.shape:
        raise DimensionMismatch("rewards and values must have equal length")
    next_values = np.append(values[1:], bootstrap_value)
    deltas = rewards + gamma * next_values - values
    adv = np.zeros_like(deltas)
    running = 0.0
    for t in reversed(range(len(deltas))):
        running = deltas[t] + gamma * lam * running
        adv[t] = running
    return adv


def gae_padded(rewards, values, mask, gamma: float, lam: float) -> np.ndarray:
    """GAE over (T, n) padded arrays; steps past an episode's end bootstrap with zero."""
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1])
    next_v = np.zeros(rewards.shape[1])
    for t in reversed(range(T)):
        live = mask[t]
        delta = rewards[t] + gamma * next_v - values[t]
        running = np.where(live, delta + gamma * lam * running, 0.0)
        adv[t] = running
        next_v = np.where(live, values[t], 0.0)
    return adv


# ---------------------------------------------------------------- optimiser and update

class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: PolicyParameters, grads: dict, lr: float, inplace: bool = False) -> PolicyParameters:
        self.t += 1
        out = params if inplace else params.copy()
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            out.arrays[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def ppo_update(params: PolicyParameters, batch: UpdateBatch, clip_ratio: float = 0.2, epochs: int = 10,
               minibatch_size: int = 64, learning_rate: float = 3e-4, *, cfg: PPOConfig | None = None,
               optimizer: Adam | None = None, rng=None):
    """Several epochs of minibatch Adam on the PPO loss. Returns (new params, per-epoch stats)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    cfg = cfg or PPOConfig()
    cfg = PPOConfig(**{**cfg.__dict__, "clip_ratio": clip_ratio, "epochs": epochs,
                       "minibatch_size": minibatch_size, "learning_rate": learning_rate})
    optimizer = optimizer or Adam()
    rng = rng or np.random.default_rng(0)
    current = params.copy()
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(batch))
        clip_fracs = []
        for start in range(0, len(batch), cfg.minibatch_size):
            mb = batch.take(order[start:start + cfg.minibatch_size])
            loss, grads, stats = ppo_loss(current, mb, cfg)
            if not np.isfinite(loss):
                raise NonFiniteLoss("PPO loss is not finite")
            norm = np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
            if not np.isfinite(norm):
                raise NonFiniteGradient("PPO gradient is not finite")
            if cfg.max_grad_norm and norm > cfg.max_grad_norm:
                grads = {k: g * (cfg.max_grad_norm / norm) for k, g in grads.items()}
            optimizer.step(current, grads, cfg.learning_rate, inplace=True)
            clip_fracs.append(stats["clip_fraction"])
        mean, log_std = policy_forward(current, batch.inputs)
        kl = float(gaussian_kl(batch.old_mean, batch.old_log_std, mean, log_std).mean())
        history.append({"kl": kl, "clip_fraction": float(np.mean(clip_fracs))})
        if cfg.kl_stop and kl > cfg.kl_stop:
            break
    return current, history


# ---------------------------------------------------------------- policy object

class GaussianPolicy:
    """Residual (or plain) Gaussian policy bound to an input builder."""

    def __init__(self, params: PolicyParameters, input_builder):
        self.params = params
        self.input_builder = input_builder

    @property
    def input_dim(self) -> int:
        return self.params.input_dim

    @property
    def log_std(self) -> np.ndarray:
        return self.params.log_std

    def build_input(self, features, beliefs, a_e):
        return self.input_builder(features, beliefs, a_e)

    def sample(self, x, rng, deterministic: bool = False):
        mean, log_std = policy_forward(self.params, x)
        if deterministic:
            action = mean.copy()
        else:
            action = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return action, gaussian_log_prob(mean, log_std, action), mean

    def value(self, x):
        return value_forward(self.params, x)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: PolicyParameters, config: dict | None = None,
                    extra: dict | None = None) -> None:
    """Binary ``.npz`` with every array plus a JSON header (layout flags, config and its hash)."""
    config = dict(config or {})
    header = {
        **(extra or {}),
        "version": CHECKPOINT_VERSION,
        "input_dim": params.input_dim,
        "action_dim": params.action_dim,
        "hidden": list(params.hidden),
        "flags": params.flags,
        "keys": params.keys(),
        "config": config,
        "config_hash": config_hash(config),
    }
    payload = {f"arr_{i}": params.arrays[k] for i, k in enumerate(params.keys())}
    buf = io.BytesIO()
    np.savez(buf, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[PolicyParameters, dict]:
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        arrays = {k: data[f"arr_{i}"].copy() for i, k in enumerate(header["keys"])}
    params = PolicyParameters(arrays, header["input_dim"], header["action_dim"], tuple(header["hidden"]),
                              header["flags"])
    return params, header


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def gradcheck(seed: int = 0, hidden=(24, 16), input_dim: int = 8, action_dim: int = 2, n: int = 32,
              kl_coef: float = 0.5) -> float:
    """Max relative error between the PPO gradient and central differences on a random instance.

    The instance has about 1e3 parameters; non-zero weights everywhere (the zero-initialised
    mean head is re-drawn) so that every coordinate carries signal.
    """
    rng = np.random.default_rng(seed)
    params = init_params(input_dim, action_dim, rng, hidden)
    params.arrays["pi/W" + str(len(hidden))] = 0.3 * rng.standard_normal(params.arrays["pi/W" + str(len(hidden))].shape)
    params.arrays["log_std"] = rng.uniform(-1.0, 0.0, action_dim)
    x = rng.standard_normal((n, input_dim))
    mean, log_std = policy_forward(params, x)
    actions = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    # old policy is a small perturbation so most ratios sit inside the clip interval
    old_lp = gaussian_log_prob(mean, log_std, actions) + 0.05 * rng.standard_normal(n)
    batch = UpdateBatch(x, actions, rng.standard_normal(n), rng.standard_normal(n), old_lp,
                        mean + 0.1 * rng.standard_normal(mean.shape), log_std - 0.1)
    cfg = PPOConfig(kl_coef=kl_coef)
    analytic = gradient(params, batch, "ppo", cfg=cfg)
    numeric = finite_difference_gradient(params, batch, "ppo", cfg=cfg)
    return max_relative_error(analytic, numeric)
