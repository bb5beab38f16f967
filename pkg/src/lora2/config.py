"""Run configuration and its flat ``key=value`` file form."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .toy import DEFAULT_PLANTED_RANKS

_FIXED = re.compile(r"^fixed_rank\((\d+)\)$")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # rank controller
    q: float = 0.9
    r_init: int = 8
    r_target: int = 8
    r_max: int = 512
    # loss weights
    lambda_r: float = 1e-4
    lambda_e: float = 1e-4
    lambda_w: float = 0.0
    # optimisation
    learning_rate: float = 5e-5
    nu_learning_rate: float | None = None
    steps: int = 500
    batch_size: int = 1
    rank_refresh_interval: int = 1
    mode: str = "adaptive"
    seed: int = 0
    grow_b_random: bool = False
    # diagnostic prior
    sigma_theta: float = 1.0
    mu_lambda: float = 0.0
    sigma_lambda: float = 1.0
    # toy task
    n_train: int = 256
    sigma_obs: float = 0.0
    teacher_scale: float = 0.5
    planted_ranks: tuple[int, ...] = field(default=DEFAULT_PLANTED_RANKS)

    def __post_init__(self):
        self.planted_ranks = tuple(int(r) for r in self.planted_ranks)
        self.validate()

    @property
    def fixed_rank(self) -> int | None:
        m = _FIXED.match(self.mode)
        return int(m.group(1)) if m else None

    @property
    def is_fixed(self) -> bool:
        return self.fixed_rank is not None

    @property
    def nu_lr(self) -> float:
        return self.learning_rate if self.nu_learning_rate is None else self.nu_learning_rate

    def validate(self) -> None:
        if not 0.0 < self.q < 1.0:
            raise ConfigError(f"q must lie in (0, 1), got {self.q}")
        if self.mode != "adaptive" and self.fixed_rank is None:
            raise ConfigError(f"mode must be 'adaptive' or 'fixed_rank(r)', got {self.mode!r}")
        if self.r_max < 1:
            raise ConfigError("r_max must be >= 1")
        for name in ("r_init", "r_target"):
            v = getattr(self, name)
            if not 1 <= v <= self.r_max:
                raise ConfigError(f"{name}={v} must lie in [1, r_max={self.r_max}]")
        if self.fixed_rank is not None and not 1 <= self.fixed_rank <= self.r_max:
            raise ConfigError(f"fixed rank {self.fixed_rank} outside [1, {self.r_max}]")
        for name in ("lambda_r", "lambda_e", "lambda_w", "sigma_obs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("learning_rate", "sigma_theta", "sigma_lambda", "teacher_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.nu_learning_rate is not None and not self.nu_learning_rate > 0:
            raise ConfigError("nu_learning_rate must be > 0")
        if self.steps < 0 or self.batch_size < 1 or self.n_train < 1:
            raise ConfigError("steps must be >= 0, batch_size and n_train >= 1")
        if self.rank_refresh_interval < 1:
            raise ConfigError("rank_refresh_interval must be >= 1")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["planted_ranks"] = list(self.planted_ranks)
        return d


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(name: str, text: str, default):
    text = text.strip()
    try:
        if name == "nu_learning_rate":
            return None if text.lower() in ("", "none") else float(text)
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(t) for t in text.split(",") if t.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def serialize(config: TrainConfig) -> str:
    return "".join(f"{f.name}={_format(getattr(config, f.name))}\n" for f in fields(config))


def parse(text: str) -> TrainConfig:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    defaults = TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse(key, val, getattr(defaults, key))
    try:
        return TrainConfig(**values)
    except ConfigError as e:
        raise ConfigError(str(e)) from None


def load(path: str | Path) -> TrainConfig:
    return parse(Path(path).read_text())


def dump(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(serialize(config))
