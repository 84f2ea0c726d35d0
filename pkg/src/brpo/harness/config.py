"""Flat ``key = value`` run configuration with ``include = <file>`` support."""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass
from pathlib import Path

ALGOS = ("brpo", "bpo", "upmle", "psrl")
_ENSEMBLE_RE = re.compile(r"^(gaussian_combine|map_expert|random_sensing\(([0-9.eE+-]+)\)|"
                          r"scheduled_sensing\((\d+)\))$")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    env: str = "doors"
    algo: str = "brpo"
    ensemble: str = "random_sensing(0.5)"
    n_itr: int = 200
    n_sample: int = 50
    horizon: int = 0  # 0 means the environment horizon
    seed: int = 0
    bonus_epsilon: float = 0.0
    include_belief: bool = True
    include_recommendation: bool = True
    hidden: tuple = (64, 64)
    log_std_init: float = -1.0
    clip_ratio: float = 0.2
    epochs: int = 10
    minibatch_size: int = 64
    learning_rate: float = 3e-4
    kl_stop: float = 0.03
    entropy_coef: float = 1e-3
    kl_coef: float = 0.0
    max_grad_norm: float = 0.5
    gamma: float = 0.0  # 0 means the environment discount
    lam: float = 0.95
    reward_scale: float = 1.0
    eval_episodes: int = 20
    eval_seed: int = 12345
    workers: int = 1
    step_budget: int = 0  # 0 means unlimited
    leaves: int = 4
    trajectory_logs: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if self.n_itr < 0 or self.n_sample < 1:
            raise ConfigError("n_itr must be >= 0 and n_sample >= 1")
        if not _ENSEMBLE_RE.match(self.ensemble):
            raise ConfigError(f"unrecognised ensemble {self.ensemble!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def ensemble_parts(self, default_combiner: str):
        """(combiner, sensing) where sensing is None, ("random", p) or ("scheduled", t_cut)."""
        m = _ENSEMBLE_RE.match(self.ensemble)
        if m.group(2) is not None:
            return default_combiner, ("random", float(m.group(2)))
        if m.group(3) is not None:
            return default_combiner, ("scheduled", int(m.group(3)))
        return self.ensemble, None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in fields:
                raise ConfigError(f"unknown config key {k!r}")
            kw[k] = _coerce(fields[k], v)
        return cls(**kw)


def _coerce(field, value):
    default = field.default
    if isinstance(value, str):
        value = value.strip()
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{field.name}: expected a boolean, got {value!r}")
        if isinstance(default, tuple):
            return tuple(int(x) for x in value.split(",") if x.strip())
        try:
            if isinstance(default, int):
                return int(value)
            if isinstance(default, float):
                return float(value)
        except ValueError as exc:
            raise ConfigError(f"{field.name}: {exc}") from None
        return value
    if isinstance(default, tuple):
        return tuple(value)
    return value


def parse_config_text(text: str, base_dir: Path | None = None, _seen=None) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; ``include = path`` merges another file first."""
    base_dir = Path(base_dir or ".")
    _seen = set() if _seen is None else _seen
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "include":
            path = (base_dir / value).resolve()
            if path in _seen:
                raise ConfigError(f"include cycle through {path}")
            _seen.add(path)
            out.update(parse_config_text(path.read_text(), path.parent, _seen))
        else:
            out[key] = value
    return out


def load_config(path, **overrides) -> TrainConfig:
    path = Path(path)
    d = parse_config_text(path.read_text(), path.parent, {path.resolve()})
    d.update({k: str(v) for k, v in overrides.items()})
    return TrainConfig.from_dict(d)
