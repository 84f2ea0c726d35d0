from .base import (EnvSpec, IllegalAction, LatentEnv, LatentSample, Latents, StepBatch, StepResult,
                   env_reset, observation_likelihood)
from .cartpole import CartpoleEnv
from .doors import DoorsEnv, DoorsFilter
from .layout import MazeLayout, load_layout, parse_layout
from .maze import MazeEnv
from .tree import TreeEnv, tree_step

ENV_NAMES = ("tree", "doors", "maze4", "maze10", "cartpole")


def make_env(name: str, **kwargs) -> LatentEnv:
    """Build an environment by name. ``tree`` accepts ``leaves`` (a power of two)."""
    if name.startswith("tree"):
        leaves = int(kwargs.pop("leaves", name[4:] or 4))
        depth = leaves.bit_length() - 1
        if 2 ** depth != leaves:
            raise ValueError(f"tree leaf count must be a power of two, got {leaves}")
        return TreeEnv(depth, **kwargs)
    if name == "doors":
        return DoorsEnv(**kwargs)
    if name in ("maze4", "maze10"):
        return MazeEnv(name, **kwargs)
    if name == "cartpole":
        return CartpoleEnv(**kwargs)
    raise ValueError(f"unknown environment {name!r}; choose from {ENV_NAMES}")


def make_filter(env: LatentEnv):
    from ..belief import BayesFilter

    if isinstance(env, DoorsEnv):
        return DoorsFilter(env)
    return BayesFilter(env)


def doors_step(env: DoorsEnv, state, latent, action, rng=None) -> StepResult:
    return env.step_one(state, latent, action, rng)


def maze_step(env: MazeEnv, state, latent, action, rng=None) -> StepResult:
    return env.step_one(state, latent, action, rng)


def cartpole_step(env: CartpoleEnv, state, latent, action, rng=None) -> StepResult:
    return env.step_one(state, latent, action, rng)
