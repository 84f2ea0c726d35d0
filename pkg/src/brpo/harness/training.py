"""Outer training loop, evaluation and metrics I/O."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..baselines import bpo_input, latent_descriptors, psrl_tree_returns, upmle_input
from ..envs import DoorsEnv, MazeEnv, TreeEnv, make_env, make_filter
from ..experts import Ensemble, NullEnsemble, expert_bank
from ..policyopt import (Adam, GaussianPolicy, NonFiniteLoss, PPOConfig, UpdateBatch, config_hash,
                         gae_padded, init_params, load_checkpoint, ppo_update, save_checkpoint,
                         value_forward)
from ..residual import RolloutBatch, collect
from .config import TrainConfig

METRICS_VERSION = 1
METRICS_HEADER = ("iter", "episodes", "mean_return", "std_err", "success_rate", "mean_entropy_at_end",
                  "clip_fraction", "kl", "action_clip_fraction", "env_steps", "train_return",
                  "train_crashes", "train_sense_rate", "checkpoint_hash")


class LayoutMismatch(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------- setup

class InputBuilder:
    """Policy input for each algorithm: brpo uses features [|| belief] [|| a_e / bound]."""

    def __init__(self, algo: str, action_scale, include_belief=True, include_recommendation=True,
                 descriptors=None):
        self.algo = algo
        self.action_scale = np.asarray(action_scale, dtype=float)
        self.include_belief = include_belief
        self.include_recommendation = include_recommendation
        self.descriptors = descriptors

    def __call__(self, features, beliefs, a_e):
        if self.algo == "bpo":
            return bpo_input(features, beliefs)
        if self.algo == "upmle":
            return upmle_input(features, beliefs, self.descriptors)
        parts = [features]
        if self.include_belief:
            parts.append(beliefs)
        if self.include_recommendation:
            parts.append(np.asarray(a_e) / self.action_scale)
        return np.concatenate(parts, axis=-1)

    def dim(self, feature_dim: int, k: int, action_dim: int) -> int:
        if self.algo == "bpo":
            return feature_dim + k
        if self.algo == "upmle":
            return feature_dim + self.descriptors.shape[1]
        return feature_dim + k * self.include_belief + action_dim * self.include_recommendation


@dataclass
class Setup:
    env: object
    filt: object
    ensemble: object
    builder: InputBuilder
    input_dim: int
    gamma: float
    horizon: int


def default_combiner(env) -> str:
    return "map_expert" if isinstance(env, TreeEnv) else "gaussian_combine"


def build_env(cfg: TrainConfig):
    kwargs = {"leaves": cfg.leaves} if cfg.env == "tree" else {}
    return make_env(cfg.env, **kwargs)


def build_setup(cfg: TrainConfig) -> Setup:
    env = build_env(cfg)
    filt = make_filter(env)
    A = env.spec.action_dim
    if cfg.algo == "brpo":
        combiner, sensing = cfg.ensemble_parts(default_combiner(env))
        ensemble = Ensemble(expert_bank(env), combiner, sensing)
    else:
        ensemble = NullEnsemble(A)
    builder = InputBuilder(cfg.algo, env.action_scale, cfg.include_belief, cfg.include_recommendation,
                           latent_descriptors(env.latent_params))
    horizon = cfg.horizon or env.spec.horizon
    if horizon > env.spec.horizon:
        raise ValueError(f"horizon {horizon} exceeds the environment horizon {env.spec.horizon}")
    return Setup(env, filt, ensemble, builder, builder.dim(env.feature_dim, env.spec.k, A),
                 cfg.gamma or env.spec.discount, horizon)


def initial_params(cfg: TrainConfig, setup: Setup, rng):
    flags = {"algo": cfg.algo, "include_belief": cfg.include_belief,
             "include_recommendation": cfg.include_recommendation}
    return init_params(setup.input_dim, setup.env.spec.action_dim, rng, tuple(cfg.hidden),
                       cfg.log_std_init, flags)


# ---------------------------------------------------------------- rollouts

def _collect_chunk(args):
    setup, params, n, seed, deterministic, eps = args
    policy = GaussianPolicy(params, setup.builder)
    return collect(setup.env, setup.ensemble, policy, setup.filt, n, setup.horizon,
                   np.random.default_rng(seed), deterministic=deterministic, bonus_epsilon=eps)


def _merge(batches: list[RolloutBatch]) -> RolloutBatch:
    if len(batches) == 1:
        return batches[0]
    kw = {}
    for name in RolloutBatch.__dataclass_fields__:
        vals = [getattr(b, name) for b in batches]
        if name == "log_std":
            kw[name] = vals[0]
        elif name == "success":
            kw[name] = np.concatenate(vals)
        else:
            kw[name] = np.concatenate(vals, axis=1)
    return RolloutBatch(**kw)


def rollouts(setup: Setup, params, n: int, rng, *, deterministic=False, bonus_epsilon=0.0,
             workers: int = 1, pool=None) -> RolloutBatch:
    """Collect ``n`` episodes. With several workers each chunk gets its own child seed."""
    if workers <= 1 or pool is None:
        policy = GaussianPolicy(params, setup.builder)
        return collect(setup.env, setup.ensemble, policy, setup.filt, n, setup.horizon, rng,
                       deterministic=deterministic, bonus_epsilon=bonus_epsilon)
    sizes = [len(c) for c in np.array_split(np.arange(n), workers) if len(c)]
    seeds = rng.integers(2 ** 63, size=len(sizes))
    jobs = [(setup, params, m, int(s), deterministic, bonus_epsilon) for m, s in zip(sizes, seeds)]
    return _merge(list(pool.map(_collect_chunk, jobs)))


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    mean_return: float
    std_err: float
    success_rate: float
    sense_rate: float
    crash_rate: float
    sense_location_histogram: dict
    mean_entropy_at_end: float
    returns: np.ndarray = field(repr=False)
    sense_positions: np.ndarray = field(repr=False)
    crashes_per_episode: float = 0.0
    action_clip_fraction: float = 0.0

    def near_wall_fraction(self, wall_y: float, within: float = 2.0) -> float:
        """Share of sensing events whose position lies within ``within`` of the line y = wall_y."""
        if len(self.sense_positions) == 0:
            return float("nan")
        return float(np.mean(np.abs(self.sense_positions[:, 1] - wall_y) <= within))

    def summary(self) -> dict:
        return {"mean_return": self.mean_return, "std_err": self.std_err, "success_rate": self.success_rate,
                "sense_rate": self.sense_rate, "crash_rate": self.crash_rate,
                "mean_entropy_at_end": self.mean_entropy_at_end,
                "action_clip_fraction": self.action_clip_fraction,
                "sense_location_histogram": self.sense_location_histogram}


def std_err(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0


def summarize(batch: RolloutBatch, env) -> EvalResult:
    r = batch.returns
    steps = max(batch.env_steps, 1)
    t_idx, e_idx = np.nonzero(batch.sensed & batch.mask)
    pos = env.positions(batch.states[t_idx + 1, e_idx]) if len(t_idx) else None
    pos = np.zeros((0, 2)) if pos is None else pos
    hist = sense_histogram(pos, env)
    return EvalResult(
        mean_return=float(r.mean()),
        std_err=std_err(r),
        success_rate=float(batch.success.mean()),
        sense_rate=float((batch.sensed & batch.mask).sum() / steps),
        crash_rate=float((batch.crashes & batch.mask).sum() / batch.n_episodes),
        sense_location_histogram=hist,
        mean_entropy_at_end=float(batch.final_entropy().mean()),
        returns=r,
        sense_positions=pos,
        crashes_per_episode=float((batch.crashes & batch.mask).sum() / batch.n_episodes),
        action_clip_fraction=float((batch.clipped & batch.mask).sum() / steps),
    )


def sense_histogram(positions, env) -> dict:
    """2-D counts of sensing positions on unit cells; Doors also bins the distance to the wall."""
    out = {}
    if isinstance(env, DoorsEnv):
        from ..envs.doors import WALL_Y

        d = np.abs(np.asarray(positions)[:, 1] - WALL_Y) if len(positions) else np.zeros(0)
        counts, edges = np.histogram(d, bins=np.arange(0, 13))
        out["wall_distance_edges"] = edges.tolist()
        out["wall_distance_counts"] = counts.tolist()
    if isinstance(env, (DoorsEnv, MazeEnv)) and len(positions):
        lo = np.floor(positions.min(axis=0))
        hi = np.ceil(positions.max(axis=0)) + 1
        counts, xe, ye = np.histogram2d(positions[:, 0], positions[:, 1],
                                        bins=[np.arange(lo[0], hi[0]), np.arange(lo[1], hi[1])])
        out["xy_edges"] = [xe.tolist(), ye.tolist()]
        out["xy_counts"] = counts.astype(int).tolist()
    return out


def evaluate_params(setup: Setup, params, n_episodes: int, seed: int) -> tuple[EvalResult, RolloutBatch]:
    batch = rollouts(setup, params, n_episodes, np.random.default_rng(seed), deterministic=True)
    return summarize(batch, setup.env), batch


def evaluate(checkpoint, n_episodes: int = 100, seed: int = 0, env=None) -> EvalResult:
    """Evaluate a saved checkpoint. ``env`` (optional) must match the one it was trained on."""
    params, header = load_checkpoint(checkpoint)
    cfg = TrainConfig.from_dict(header["config"])
    setup = build_setup(cfg)
    if env is not None:
        if env.spec.name != setup.env.spec.name or getattr(env, "layout_hash", None) != \
                getattr(setup.env, "layout_hash", None):
            raise LayoutMismatch(f"checkpoint was trained on {setup.env.spec.name}, got {env.spec.name}")
        setup.env = env
    expected = header.get("layout_hash")
    if expected is not None and getattr(setup.env, "layout_hash", None) != expected:
        raise LayoutMismatch("maze layout changed since the checkpoint was written")
    if params.input_dim != setup.input_dim:
        raise LayoutMismatch(f"checkpoint input width {params.input_dim} != {setup.input_dim}")
    return evaluate_params(setup, params, n_episodes, seed)[0]


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    config: TrainConfig
    best_params: object
    final_params: object
    metrics: list
    initial_eval: EvalResult | None
    best_eval: dict
    env_steps: int
    checkpoint: Path | None = None


def update_batch(setup: Setup, params, batch: RolloutBatch, cfg: TrainConfig) -> UpdateBatch:
    mask = batch.mask
    T, n = mask.shape
    values = np.zeros((T, n))
    values[mask] = value_forward(params, batch.inputs[mask])
    rewards = batch.rewards * cfg.reward_scale
    adv = gae_padded(rewards, values, mask, setup.gamma, cfg.lam)
    ret = adv + values
    a = adv[mask]
    a = (a - a.mean()) / (a.std() + 1e-8)
    return UpdateBatch(batch.inputs[mask], batch.residual_actions[mask], a, ret[mask],
                       batch.log_probs[mask], batch.means[mask], batch.log_std)


def train(cfg: TrainConfig, out_dir=None, progress=None) -> TrainResult:
    """Run the outer loop: rollouts of the current policy, one PPO update, held-out evaluation."""
    if cfg.algo == "psrl":
        return _train_psrl(cfg, out_dir)
    setup = build_setup(cfg)
    rng = np.random.default_rng(cfg.seed)
    params = initial_params(cfg, setup, rng)
    ppo_cfg = PPOConfig(cfg.clip_ratio, cfg.epochs, cfg.minibatch_size, cfg.learning_rate, cfg.kl_stop,
                        cfg.entropy_coef, 0.5, cfg.kl_coef, cfg.max_grad_norm)
    optimizer = Adam()
    init_eval, _ = evaluate_params(setup, params, cfg.eval_episodes, cfg.eval_seed)
    best_params, best = params, init_eval.mean_return
    best_info = {"iter": -1, **init_eval.summary()}
    metrics = []
    episodes = steps = 0
    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for it in range(cfg.n_itr):
            if cfg.step_budget and steps >= cfg.step_budget:
                break
            batch = rollouts(setup, params, cfg.n_sample, rng, bonus_epsilon=cfg.bonus_epsilon,
                             workers=cfg.workers, pool=pool)
            episodes += batch.n_episodes
            steps += batch.env_steps
            ub = update_batch(setup, params, batch, cfg)
            try:
                params, hist = ppo_update(params, ub, cfg.clip_ratio, cfg.epochs, cfg.minibatch_size,
                                          cfg.learning_rate, cfg=ppo_cfg, optimizer=optimizer, rng=rng)
            except NonFiniteLoss as exc:
                raise TrainingAborted(f"iteration {it}: {exc}") from exc
            ev, _ = evaluate_params(setup, params, cfg.eval_episodes, cfg.eval_seed)
            if ev.mean_return > best:
                best, best_params = ev.mean_return, params
                best_info = {"iter": it, **ev.summary()}
            row = {
                "iter": it, "episodes": episodes, "mean_return": ev.mean_return, "std_err": ev.std_err,
                "success_rate": ev.success_rate, "mean_entropy_at_end": ev.mean_entropy_at_end,
                "clip_fraction": hist[-1]["clip_fraction"], "kl": hist[-1]["kl"],
                "action_clip_fraction": float((batch.clipped & batch.mask).sum() / max(batch.env_steps, 1)),
                "env_steps": steps, "train_return": float(batch.returns.mean()),
                "train_crashes": float((batch.crashes & batch.mask).sum() / batch.n_episodes),
                "train_sense_rate": float((batch.sensed & batch.mask).sum() / max(batch.env_steps, 1)),
                "checkpoint_hash": params.digest(),
            }
            metrics.append(row)
            if progress:
                progress(row)
    finally:
        if pool is not None:
            pool.shutdown()
    result = TrainResult(cfg, best_params, params, metrics, init_eval, best_info, steps)
    if out_dir is not None:
        write_outputs(result, setup, Path(out_dir))
    return result


def write_outputs(result: TrainResult, setup: Setup, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    (out / "config.resolved").write_text(cfg.dumps())
    with open(out / "metrics.csv", "w", newline="") as fh:
        fh.write(emit_metrics(result.metrics))
    header = cfg.to_dict()
    extra = {"layout_hash": getattr(setup.env, "layout_hash", None)}
    save_checkpoint(out / "best.npz", result.best_params, header, extra)
    save_checkpoint(out / "final.npz", result.final_params, header, extra)
    result.checkpoint = out / "best.npz"
    (out / "best_eval.json").write_text(json.dumps(result.best_eval, indent=1))
    if cfg.trajectory_logs:
        _, batch = evaluate_params(setup, result.best_params, cfg.trajectory_logs, cfg.eval_seed)
        tdir = out / "trajectories"
        tdir.mkdir(exist_ok=True)
        for i in range(batch.n_episodes):
            batch.trajectory(i).to_jsonl(tdir / f"episode{i}.jsonl")


def _train_psrl(cfg: TrainConfig, out_dir=None) -> TrainResult:
    """PSRL has nothing to optimise; each row reports one episode averaged over ``n_sample`` trials."""
    env = build_env(cfg)
    if not isinstance(env, TreeEnv):
        raise ValueError("psrl is implemented for the tree environment only")
    rng = np.random.default_rng(cfg.seed)
    per_ep = psrl_tree_returns(env.n_leaves, cfg.n_itr, cfg.n_sample, rng, per_episode=True)
    metrics = []
    for it in range(cfg.n_itr):
        r = per_ep[:, it]
        metrics.append({"iter": it, "episodes": (it + 1) * cfg.n_sample, "mean_return": float(r.mean()),
                        "std_err": std_err(r), "success_rate": float(np.mean(r > 0)),
                        "mean_entropy_at_end": float("nan"), "clip_fraction": 0.0, "kl": 0.0,
                        "action_clip_fraction": 0.0, "env_steps": (it + 1) * cfg.n_sample * env.depth,
                        "train_return": float(r.mean()), "train_crashes": float(np.mean(r < 0)),
                        "train_sense_rate": 0.0, "checkpoint_hash": "-"})
    result = TrainResult(cfg, None, None, metrics, None, {"cumulative": float(per_ep.sum(axis=1).mean())},
                         cfg.n_itr * cfg.n_sample * env.depth)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(cfg.dumps())
        (out / "metrics.csv").write_text(emit_metrics(metrics))
    return result


# ---------------------------------------------------------------- metrics CSV

def emit_metrics(metrics: list) -> str:
    """CSV text: a version comment, the fixed header, then one row per iteration.

    Floats are written with ``repr`` so re-parsing is bit-exact.
    """
    lines = [f"# brpo-metrics {METRICS_VERSION}", ",".join(METRICS_HEADER)]
    for row in metrics:
        cells = []
        for key in METRICS_HEADER:
            v = row[key]
            cells.append(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def parse_metrics(text: str) -> list:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != METRICS_HEADER:
        raise ValueError("unexpected metrics header")
    out = []
    for rec in reader:
        row = {}
        for k, v in rec.items():
            if k == "checkpoint_hash":
                row[k] = v
            elif k in ("iter", "episodes", "env_steps"):
                row[k] = int(v)
            else:
                row[k] = float(v)
        out.append(row)
    return out


def config_digest(cfg: TrainConfig) -> str:
    return config_hash(cfg.to_dict())
