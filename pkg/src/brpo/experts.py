"""Clairvoyant experts (one per latent hypothesis) and the rules that fuse them into an ensemble."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .belief import map_index
from .envs.cartpole import GRID_PARAMS, CartpoleEnv, linearize
from .envs.doors import DOOR_CENTERS, GOAL_Y, SPEED_CAP, WALL_Y, CONFIGS, DoorsEnv, cap_speed
from .envs.layout import MazeLayout, inside_walls, line_of_sight
from .envs.maze import MazeEnv
from .envs.tree import TreeEnv

EXPERT_STD = 0.05


class RiccatiDiverged(RuntimeError):
    pass


class NoPath(RuntimeError):
    pass


class SingularPrecision(np.linalg.LinAlgError):
    pass


class SenseChannelAbsent(ValueError):
    pass


# ---------------------------------------------------------------- LQR

@dataclass(frozen=True)
class LqrGain:
    K: np.ndarray
    P: np.ndarray


def lqr_solve(A, B, Q, R, tol: float = 1e-9, max_iter: int = 100_000) -> LqrGain:
    """Discrete-time LQR by fixed-point iteration of the Riccati map, starting from P = Q."""
    A, B, Q, R = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, Q, R))
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        gain = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ gain
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise RiccatiDiverged("Riccati iterate became non-finite")
        if np.max(np.abs(P_next - P)) < tol:
            P = P_next
            break
        P = P_next
    else:
        raise RiccatiDiverged(f"no convergence within {max_iter} iterations")
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return LqrGain(K, P)


# ---------------------------------------------------------------- planner

class GridPlanner:
    """Shortest paths on an 8-connected grid over free space, one distance field per goal.

    For each free cell the planner stores the furthest point of its shortest path
    that is visible from the cell centre; queries steer toward that point.
    """

    def __init__(self, layout: MazeLayout, cell: float = 0.25, margin: float = 0.15):
        self.layout = layout
        self.cell = cell
        self.margin = margin
        self.walls = layout.all_walls
        x0, y0, x1, y1 = layout.bounds
        self.nx = int(round((x1 - x0) / cell))
        self.ny = int(round((y1 - y0) / cell))
        ix, iy = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        self.centers = np.stack([x0 + (ix.ravel() + 0.5) * cell, y0 + (iy.ravel() + 0.5) * cell], axis=1)
        self.free = ~inside_walls(self.centers, self.walls, margin)
        self._graph = self._build_graph()
        free_idx = np.flatnonzero(self.free)
        d = np.linalg.norm(self.centers[:, None, :] - self.centers[None, free_idx, :], axis=2)
        self.nearest_free = free_idx[np.argmin(d, axis=1)]
        self.goal_cells = self.nearest_free[self.cell_of(layout.goals, snap=False)]
        self.dist, self.pred = dijkstra(self._graph, directed=False, indices=self.goal_cells,
                                        return_predecessors=True)
        self.waypoints = np.stack([self._waypoints(g) for g in range(len(layout.goals))])

    def cell_of(self, points, snap: bool = True) -> np.ndarray:
        p = np.atleast_2d(points)
        x0, y0 = self.layout.bounds[:2]
        ix = np.clip(((p[:, 0] - x0) / self.cell).astype(int), 0, self.nx - 1)
        iy = np.clip(((p[:, 1] - y0) / self.cell).astype(int), 0, self.ny - 1)
        idx = ix * self.ny + iy
        return self.nearest_free[idx] if snap else idx

    def _build_graph(self):
        rows, cols, weights = [], [], []
        free = self.free.reshape(self.nx, self.ny)
        for dx, dy in ((1, 0), (0, 1), (1, 1), (1, -1)):
            for ix in range(self.nx):
                jx = ix + dx
                if jx >= self.nx:
                    continue
                for iy in range(self.ny):
                    jy = iy + dy
                    if not 0 <= jy < self.ny or not (free[ix, iy] and free[jx, jy]):
                        continue
                    if dx and dy and not (free[jx, iy] and free[ix, jy]):
                        continue  # no corner cutting
                    rows.append(ix * self.ny + iy)
                    cols.append(jx * self.ny + jy)
                    weights.append(self.cell * np.hypot(dx, dy))
        n = self.nx * self.ny
        return coo_matrix((weights, (rows, cols)), shape=(n, n)).tocsr()

    def path_cells(self, goal: int, cell: int) -> list[int]:
        """Cells from ``cell`` to the goal cell along the shortest-path tree."""
        if not np.isfinite(self.dist[goal, cell]):
            raise NoPath(f"goal {goal} unreachable from cell {cell}")
        path = [cell]
        while path[-1] != self.goal_cells[goal]:
            path.append(int(self.pred[goal, path[-1]]))
        return path

    def _waypoints(self, goal: int) -> np.ndarray:
        out = np.full((len(self.centers), 2), np.nan)
        goal_pt = self.layout.goals[goal]
        for cell in np.flatnonzero(self.free & np.isfinite(self.dist[goal])):
            pts = np.vstack([self.centers[self.path_cells(goal, cell)], goal_pt])
            src = np.repeat(self.centers[cell][None], len(pts), axis=0)
            visible = line_of_sight(src, pts, self.walls, self.margin * 0.5)
            visible[0] = True
            out[cell] = pts[np.flatnonzero(visible)[-1]]
        return out

    def targets(self, positions, goal_idx=None) -> np.ndarray:
        """Steering targets for every (position, goal) pair, shape (n, k, 2)."""
        p = np.atleast_2d(np.asarray(positions, dtype=float))
        goals = self.layout.goals if goal_idx is None else self.layout.goals[np.atleast_1d(goal_idx)]
        gsel = np.arange(len(self.layout.goals)) if goal_idx is None else np.atleast_1d(goal_idx)
        n, k = len(p), len(gsel)
        cells = self.cell_of(p)
        if np.any(~np.isfinite(self.dist[np.ix_(gsel, cells)])):
            raise NoPath("a goal is unreachable from the queried position")
        src = np.repeat(p, k, axis=0)
        direct = line_of_sight(src, np.tile(goals, (n, 1)), self.walls).reshape(n, k)
        way = self.waypoints[gsel][:, cells].transpose(1, 0, 2)
        seen = line_of_sight(src, way.reshape(-1, 2), self.walls).reshape(n, k)
        # fall back to the next cell centre on the path when the stored waypoint is hidden
        nxt = self.pred[np.ix_(gsel, cells)].T
        nxt = np.where(nxt < 0, cells[:, None], nxt)
        step = self.centers[nxt]
        way = np.where(seen[..., None], way, step)
        return np.where(direct[..., None], goals[None], way)


@lru_cache(maxsize=8)
def _planner_for(layout_hash: str, layout_text: str) -> GridPlanner:
    from .envs.layout import parse_layout

    return GridPlanner(parse_layout(layout_text))


def planner_for(layout: MazeLayout) -> GridPlanner:
    return _planner_for(layout.hash, layout.canonical())


def steer(positions, targets, cap: float) -> np.ndarray:
    delta = targets - positions
    dist = np.linalg.norm(delta, axis=-1, keepdims=True)
    return delta / np.maximum(dist, 1e-12) * np.minimum(dist, cap)


def goal_expert_action(layout: MazeLayout, goal_index: int, state) -> tuple[np.ndarray, np.ndarray]:
    """Velocity toward ``goal_index`` along the planned path, with a zero sense channel."""
    if not 0 <= goal_index < len(layout.goals):
        raise IndexError(goal_index)
    pos = np.asarray(state, dtype=float)[:2][None]
    target = planner_for(layout).targets(pos, goal_index)[0, 0]
    mean = np.zeros(3)
    mean[:2] = steer(pos[0], target, layout.speed_cap)
    return mean, np.full(3, EXPERT_STD ** 2)


# ---------------------------------------------------------------- expert banks

class ExpertBank:
    """All k clairvoyant experts of one environment, evaluated together."""

    env = None

    def recommend(self, states) -> tuple[np.ndarray, np.ndarray]:
        """Means and diagonal covariances, each of shape (n, k, action_dim)."""
        raise NotImplementedError

    def _covs(self, means):
        return np.full_like(means, EXPERT_STD ** 2)


class TreeExperts(ExpertBank):
    """Expert j walks to leaf j and never senses."""

    def __init__(self, env: TreeEnv):
        self.env = env

    def recommend(self, states):
        states = np.asarray(states, dtype=float)
        d = self.env.depth
        depth = states[:, 0].astype(int)
        leaves = np.arange(self.env.n_leaves)
        shift = np.clip(d - 1 - depth, 0, None)[:, None]
        bit = (leaves[None, :] >> shift) & 1
        means = np.zeros((len(states), self.env.n_leaves, 2))
        means[..., 0] = np.where(bit == 1, 1.0, -1.0)
        means[..., 1] = -1.0
        means[depth >= d] = 0.0
        return means, self._covs(means)


class DoorsExperts(ExpertBank):
    """Expert c heads for the nearest door open under configuration c, then walks through it."""

    def __init__(self, env: DoorsEnv):
        self.env = env

    def recommend(self, states):
        states = np.asarray(states, dtype=float)
        pos = states[:, :2]
        n = len(states)
        dx = np.abs(pos[:, 0:1] - DOOR_CENTERS[None, :])
        # nearest open door per configuration, shape (n, 16)
        masked = np.where(CONFIGS[None, :, :] > 0, dx[:, None, :], np.inf)
        door = np.argmin(masked, axis=2)
        any_open = CONFIGS.sum(axis=1) > 0
        door_x = DOOR_CENTERS[door]
        x = pos[:, 0:1]
        y = pos[:, 1:2]
        aligned = np.abs(x - door_x) <= 0.5
        beyond = y >= WALL_Y
        tx = np.where(beyond, x, door_x)
        ty = np.where(beyond | aligned, GOAL_Y + 0.5, np.minimum(y, WALL_Y - 0.5))
        targets = np.stack([tx, ty], axis=2)
        means = np.zeros((n, 16, 3))
        means[..., :2] = steer(pos[:, None, :], targets, SPEED_CAP)
        means[:, ~any_open, :] = 0.0
        return means, self._covs(means)


class MazeExperts(ExpertBank):
    def __init__(self, env: MazeEnv):
        self.env = env
        self.planner = planner_for(env.layout)

    def recommend(self, states):
        states = np.asarray(states, dtype=float)
        pos = states[:, :2]
        targets = self.planner.targets(pos)
        means = np.zeros((len(states), self.env.n_goals, 3))
        means[..., :2] = steer(pos[:, None, :], targets, self.env.layout.speed_cap)
        return means, self._covs(means)


class CartpoleExperts(ExpertBank):
    """One LQR per grid-centre hypothesis, designed on the linearised RK4 map."""

    Q = np.diag([1.0, 1.0, 10.0, 1.0])
    R = np.array([[0.1]])

    def __init__(self, env: CartpoleEnv):
        self.env = env
        self.models = [linearize(m, l) for m, l in GRID_PARAMS]
        self.gains = [lqr_solve(A, B, self.Q, self.R) for A, B in self.models]
        self.K = np.stack([g.K[0] for g in self.gains])

    def recommend(self, states):
        states = np.asarray(states, dtype=float)
        means = -(states @ self.K.T)[..., None]
        return means, self._covs(means)


def expert_bank(env) -> ExpertBank:
    if isinstance(env, TreeEnv):
        return TreeExperts(env)
    if isinstance(env, DoorsEnv):
        return DoorsExperts(env)
    if isinstance(env, MazeEnv):
        return MazeExperts(env)
    if isinstance(env, CartpoleEnv):
        return CartpoleExperts(env)
    raise TypeError(f"no expert bank for {type(env).__name__}")


# ---------------------------------------------------------------- combiners

def combine_gaussian(belief, means, covs) -> np.ndarray:
    """Maximiser of sum_i b_i log N(a; mu_i, Sigma_i): the precision-weighted mean.

    ``means`` is (..., k, A). ``covs`` is either diagonal (..., k, A) or full (..., k, A, A).
    """
    b = np.asarray(getattr(belief, "probs", belief), dtype=float)
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    if covs.shape == means.shape:
        if np.any(covs <= 0):
            raise SingularPrecision("diagonal covariances must be positive")
        prec = b[..., None] / covs
        total = prec.sum(axis=-2)
        if np.any(total <= 0):
            raise SingularPrecision("weighted precision sum is singular")
        out = (prec * means).sum(axis=-2) / total
    else:
        prec = np.linalg.inv(covs) * b[..., None, None]
        total = prec.sum(axis=-3)
        rhs = np.einsum("...kij,...kj->...i", prec, means)
        try:
            out = np.linalg.solve(total, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as err:
            raise SingularPrecision(str(err)) from err
    # a point-mass belief returns its expert's mean bit-exactly rather than up to rounding
    single = (b > 0).sum(axis=-1) == 1
    if np.any(single):
        pick = np.take_along_axis(means, np.argmax(b, axis=-1)[..., None, None], axis=-2)[..., 0, :]
        out = np.where(single[..., None], pick, out)
    return out


def map_expert(belief, bank: ExpertBank, state) -> tuple[np.ndarray, np.ndarray]:
    """Recommendation of the most probable hypothesis' expert, unchanged."""
    b = np.asarray(getattr(belief, "probs", belief), dtype=float)
    means, covs = bank.recommend(np.atleast_2d(state))
    i = map_index(b)
    return means[0, i], covs[0, i]


def random_sensing_augment(actions, p: float, rng, sense_index=None) -> np.ndarray:
    """Overwrite the sense channel with +1 w.p. ``p`` and -1 otherwise."""
    if sense_index is None:
        raise SenseChannelAbsent("environment has no sense channel")
    out = np.array(actions, dtype=float, copy=True)
    flip = rng.random(out.shape[:-1]) < p
    out[..., sense_index] = np.where(flip, 1.0, -1.0)
    return out


def scheduled_sensing_augment(actions, t: int, t_cut: int, sense_index=None) -> np.ndarray:
    """Sense on while ``t < t_cut`` and off afterwards."""
    if sense_index is None:
        raise SenseChannelAbsent("environment has no sense channel")
    out = np.array(actions, dtype=float, copy=True)
    out[..., sense_index] = 1.0 if t < t_cut else -1.0
    return out


@dataclass
class ExpertRecommendation:
    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray
    combined_action: np.ndarray


COMBINERS = ("gaussian_combine", "map_expert")


class Ensemble:
    """Fixed ensemble policy pi_e(s, b): combine experts, then optionally force a sensing pattern.

    ``sensing`` is ``None``, ``("random", p)`` or ``("scheduled", t_cut)``.
    """

    def __init__(self, bank: ExpertBank, combiner: str = "gaussian_combine", sensing=None):
        if combiner not in COMBINERS:
            raise ValueError(f"unknown combiner {combiner!r}")
        self.bank = bank
        self.combiner = combiner
        self.sensing = sensing
        self.sense_index = getattr(bank.env, "sense_index", None)
        if sensing is not None and self.sense_index is None:
            raise SenseChannelAbsent("sensing augmentation needs a sense channel")

    def recommend(self, states, beliefs, t: int, rng) -> ExpertRecommendation:
        means, covs = self.bank.recommend(states)
        beliefs = np.asarray(beliefs, dtype=float)
        if self.combiner == "map_expert":
            pick = map_index(beliefs)
            action = means[np.arange(len(means)), pick]
        else:
            action = combine_gaussian(beliefs, means, covs)
        if self.sensing is not None:
            kind, arg = self.sensing
            if kind == "random":
                action = random_sensing_augment(action, arg, rng, self.sense_index)
            elif kind == "scheduled":
                action = scheduled_sensing_augment(action, t, arg, self.sense_index)
            else:
                raise ValueError(f"unknown sensing augmentation {kind!r}")
        return ExpertRecommendation(means, covs, beliefs, action)

    def act(self, states, beliefs, t: int, rng) -> np.ndarray:
        return self.recommend(states, beliefs, t, rng).combined_action


class NullEnsemble:
    """Zero recommendation: executing a_e + a_r reduces to the raw policy (BPO, UP-MLE)."""

    def __init__(self, action_dim: int):
        self.action_dim = action_dim
        self.sensing = None

    def act(self, states, beliefs, t, rng):
        return np.zeros((len(states), self.action_dim))
