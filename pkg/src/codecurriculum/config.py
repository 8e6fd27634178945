"""Run configuration. Files are strict JSON: every field must be present."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CurriculumConfig:
    # replay distribution
    tau: float
    beta: float
    # learner
    gamma: float
    alpha: float
    epsilon_start: float
    epsilon_end: float
    epsilon_decay_fraction: float
    # curriculum cadence and bonus
    v: int
    d: float
    N: int
    min_episodes: int
    status_thresholds: tuple
    # batch composition
    updates_per_cycle: int
    target_fraction: float
    new_fraction: float
    replay_fraction: float
    num_unique_new: int
    num_unique_replay: int
    num_unique_replay_no_new: int
    # generation
    surplus_factor: float
    rollout_steps: int
    few_shot_k: int
    # budget and evaluation
    budget_steps: int
    target_max_timesteps: int
    level_max_timesteps: int
    eval_interval: int
    eval_instances: int
    # baselines
    dr_pool_size: int

    def __post_init__(self):
        object.__setattr__(self, "status_thresholds", tuple(float(x) for x in self.status_thresholds))
        problems = []
        if not 0.0 <= self.tau <= 1.0:
            problems.append("tau must lie in [0, 1]")
        if not self.beta > 0:
            problems.append("beta must be positive")
        if not 0.0 < self.gamma <= 1.0:
            problems.append("gamma must lie in (0, 1]")
        if not 0.0 < self.alpha <= 1.0:
            problems.append("alpha must lie in (0, 1]")
        for name in ("epsilon_start", "epsilon_end", "epsilon_decay_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        if len(self.status_thresholds) != 3 or not (
            self.status_thresholds[0] > self.status_thresholds[1] > self.status_thresholds[2]
        ):
            problems.append("status_thresholds must be three strictly decreasing values")
        fr = (self.target_fraction, self.new_fraction, self.replay_fraction)
        if any(not 0.0 <= f <= 1.0 for f in fr) or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
            problems.append("target/new/replay fractions must be in [0, 1] and sum to 1")
        if self.target_fraction >= 1.0 and self.replay_fraction > 0:
            problems.append("target_fraction of 1 leaves no room for replay")
        for name in (
            "v",
            "N",
            "min_episodes",
            "updates_per_cycle",
            "num_unique_new",
            "num_unique_replay",
            "num_unique_replay_no_new",
            "few_shot_k",
            "budget_steps",
            "target_max_timesteps",
            "level_max_timesteps",
            "eval_interval",
            "eval_instances",
            "dr_pool_size",
        ):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                problems.append(f"{name} must be a positive integer")
        if not isinstance(self.rollout_steps, int) or self.rollout_steps < 0:
            problems.append("rollout_steps must be a non-negative integer")
        if self.surplus_factor < 1.0:
            problems.append("surplus_factor must be at least 1")
        if self.d < 0:
            problems.append("d must be non-negative")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_dict(cls, data: dict) -> "CurriculumConfig":
        names = {f.name for f in fields(cls)}
        missing = sorted(names - set(data))
        unknown = sorted(set(data) - names)
        if missing or unknown:
            parts = []
            if missing:
                parts.append("missing fields: " + ", ".join(missing))
            if unknown:
                parts.append("unknown fields: " + ", ".join(unknown))
            raise ConfigError("; ".join(parts))
        return cls(**data)

    @classmethod
    def load(cls, path) -> "CurriculumConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["status_thresholds"] = list(self.status_thresholds)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def replace(self, **changes) -> "CurriculumConfig":
        return CurriculumConfig.from_dict({**self.to_dict(), **changes})


DEFAULTS = {
    "tau": 0.3,
    "beta": 1.0,
    "gamma": 0.99,
    "alpha": 0.1,
    "epsilon_start": 1.0,
    "epsilon_end": 0.05,
    "epsilon_decay_fraction": 0.5,
    "v": 2,
    "d": 1.0,
    "N": 20,
    "min_episodes": 8,
    "status_thresholds": [0.75, 0.50, 0.25],
    "updates_per_cycle": 100,
    "target_fraction": 0.20,
    "new_fraction": 0.53,
    "replay_fraction": 0.27,
    "num_unique_new": 10,
    "num_unique_replay": 5,
    "num_unique_replay_no_new": 15,
    "surplus_factor": 1.5,
    "rollout_steps": 32,
    "few_shot_k": 2,
    "budget_steps": 200_000,
    "target_max_timesteps": 400,
    "level_max_timesteps": 150,
    "eval_interval": 5,
    "eval_instances": 64,
    "dr_pool_size": 64,
}


def default_config(**overrides) -> CurriculumConfig:
    return CurriculumConfig.from_dict({**DEFAULTS, **overrides})
