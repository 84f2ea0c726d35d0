"""Maze layout files and planar geometry helpers.

Layout files are line-oriented text::

    # comment
    format brpo-maze 1
    name maze4
    bounds 0 0 10 10
    start 3.5 0.5 6.5 1.5          # x0 y0 x1 y1 of the start region
    wall 2 2 8 2.6                 # axis-aligned rectangle x0 y0 x1 y1
    goal 1 4
    goal_radius 0.3
    speed_cap 1.0
    sense_noise 0.1
    reward_active 500
    reward_inactive -500
    inactive_terminal 1
    horizon 500

The layout hash is the SHA-256 of the canonical re-serialisation, so comments and
whitespace do not change it.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

FORMAT = "brpo-maze"
FORMAT_VERSION = 1

_SCALARS = {
    "goal_radius": 0.3,
    "speed_cap": 1.0,
    "sense_noise": 0.1,
    "reward_active": 500.0,
    "reward_inactive": -500.0,
    "inactive_terminal": 1.0,
    "horizon": 500.0,
}


class LayoutError(ValueError):
    pass


@dataclass
class MazeLayout:
    name: str
    bounds: np.ndarray
    start: np.ndarray
    walls: np.ndarray
    goals: np.ndarray
    params: dict = field(default_factory=lambda: dict(_SCALARS))

    def __getattr__(self, key):
        params = self.__dict__.get("params", {})
        if key in params:
            return params[key]
        raise AttributeError(key)

    @property
    def all_walls(self) -> np.ndarray:
        """Interior walls plus four thin boundary walls."""
        x0, y0, x1, y1 = self.bounds
        t = 1.0
        border = np.array([
            [x0 - t, y0 - t, x1 + t, y0],
            [x0 - t, y1, x1 + t, y1 + t],
            [x0 - t, y0, x0, y1],
            [x1, y0, x1 + t, y1],
        ])
        return np.concatenate([self.walls.reshape(-1, 4), border])

    def canonical(self) -> str:
        def fmt(vals):
            return " ".join(repr(float(v)) for v in vals)

        lines = [f"format {FORMAT} {FORMAT_VERSION}", f"name {self.name}",
                 f"bounds {fmt(self.bounds)}", f"start {fmt(self.start)}"]
        lines += [f"wall {fmt(w)}" for w in self.walls]
        lines += [f"goal {fmt(g)}" for g in self.goals]
        lines += [f"{key} {repr(float(self.params[key]))}" for key in sorted(self.params)]
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def parse_layout(text: str) -> MazeLayout:
    name, bounds, start = None, None, None
    walls, goals = [], []
    params = dict(_SCALARS)
    seen_format = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        try:
            if key == "format":
                if rest[0] != FORMAT or int(rest[1]) != FORMAT_VERSION:
                    raise LayoutError(f"unsupported layout format {rest}")
                seen_format = True
            elif key == "name":
                name = rest[0]
            elif key == "bounds":
                bounds = np.array(rest, dtype=float)
            elif key == "start":
                start = np.array(rest, dtype=float)
            elif key == "wall":
                walls.append(np.array(rest, dtype=float))
            elif key == "goal":
                goals.append(np.array(rest, dtype=float))
            elif key in _SCALARS:
                params[key] = float(rest[0])
            else:
                raise LayoutError(f"line {lineno}: unknown key {key!r}")
        except (IndexError, ValueError) as err:
            if isinstance(err, LayoutError):
                raise
            raise LayoutError(f"line {lineno}: {err}") from err
    if not seen_format:
        raise LayoutError("missing format line")
    if name is None or bounds is None or start is None or not goals:
        raise LayoutError("layout needs name, bounds, start and at least one goal")
    if bounds.shape != (4,) or start.shape != (4,):
        raise LayoutError("bounds/start take four numbers")
    w = np.array(walls, dtype=float).reshape(-1, 4)
    if np.any(w[:, 2] <= w[:, 0]) or np.any(w[:, 3] <= w[:, 1]):
        raise LayoutError("walls must have x0 < x1 and y0 < y1")
    g = np.array(goals, dtype=float)
    if g.shape[1] != 2:
        raise LayoutError("goals take two numbers")
    layout = MazeLayout(name, bounds, start, w, g, params)
    if np.any(inside_walls(g, w)):
        raise LayoutError("a goal lies inside a wall")
    return layout


def load_layout(name_or_path: str) -> MazeLayout:
    """Load a shipped layout by name (``maze4``, ``maze10``) or a layout file path."""
    path = Path(name_or_path)
    if path.suffix == ".txt" or path.exists():
        return parse_layout(path.read_text())
    text = resources.files("brpo.envs.layouts").joinpath(f"{name_or_path}.txt").read_text()
    return parse_layout(text)


def inside_walls(points, walls, margin: float = 0.0) -> np.ndarray:
    """True where a point lies strictly inside any (inflated) wall rectangle."""
    p = np.atleast_2d(points)[:, None, :]
    w = np.asarray(walls)[None, :, :]
    inside = ((p[..., 0] > w[..., 0] - margin) & (p[..., 0] < w[..., 2] + margin)
              & (p[..., 1] > w[..., 1] - margin) & (p[..., 1] < w[..., 3] + margin))
    return inside.any(axis=1)


def segment_hit_fraction(p0, p1, walls, margin: float = 0.0) -> np.ndarray:
    """Smallest fraction t in [0, 1] at which segment p0->p1 enters a wall; inf if none.

    Slab test against every axis-aligned rectangle, vectorised over segments and walls.
    """
    p0 = np.atleast_2d(p0)[:, None, :]
    d = np.atleast_2d(p1)[:, None, :] - p0
    w = np.asarray(walls)[None, :, :]
    lo = w[..., :2] - margin
    hi = w[..., 2:] + margin
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - p0) * inv
        t2 = (hi - p0) * inv
    tmin = np.where(d == 0, np.where((p0 > lo) & (p0 < hi), -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(d == 0, np.where((p0 > lo) & (p0 < hi), np.inf, -np.inf), np.maximum(t1, t2))
    enter = tmin.max(axis=2)
    leave = tmax.min(axis=2)
    hit = (enter < leave) & (leave > 0) & (enter <= 1)
    t = np.where(hit, np.maximum(enter, 0.0), np.inf)
    return t.min(axis=1)


def line_of_sight(p0, p1, walls, margin: float = 0.0) -> np.ndarray:
    return ~np.isfinite(segment_hit_fraction(p0, p1, walls, margin))
