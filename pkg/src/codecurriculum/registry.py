"""Shared vocabulary of the crafting world: blocks, items, achievements, mechanics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

NUM_FLOORS = 2
MAP_ROWS = 12
MAP_COLS = 12

BLOCKS = (
    "GRASS",
    "TREE",
    "STONE",
    "COAL",
    "IRON",
    "TABLE",
    "FURNACE",
    "LADDER",
    "WALL",
    "WATER",
)
BLOCK_INDEX = {name: i for i, name in enumerate(BLOCKS)}

# Inventory slots. Tools are tiers: 1 = wood, 2 = stone, 3 = iron.
ITEMS = ("wood", "stone", "coal", "iron", "pickaxe", "sword")
ITEM_INDEX = {name: i for i, name in enumerate(ITEMS)}
ITEM_MAX = {"wood": 9, "stone": 9, "coal": 9, "iron": 9, "pickaxe": 3, "sword": 3}

MOB_KINDS = ("passive", "melee")
MOB_CAP = 3

MECHANICS_DEFAULTS = {
    "melee_spawn_multiplier": 1.0,
    "passive_spawn_multiplier": 1.0,
    "mob_damage_multiplier": 1.0,
    "needs_depletion_multiplier": 1.0,
    "monsters_killed_to_clear": 4,
}
MECHANICS_FIELDS = tuple(MECHANICS_DEFAULTS)


@dataclass(frozen=True)
class Achievement:
    id: str
    reward: float
    tier: str


@dataclass(frozen=True)
class AchievementRegistry:
    """Ordered achievement table; the order doubles as the prerequisite order."""

    achievements: tuple[Achievement, ...]

    def __post_init__(self):
        ids = [a.id for a in self.achievements]
        if len(set(ids)) != len(ids):
            raise ValueError("achievement ids must be unique")
        for a in self.achievements:
            if not a.reward > 0:
                raise ValueError(f"reward of {a.id} must be positive")
            if a.tier not in ("basic", "deep"):
                raise ValueError(f"unknown tier {a.tier!r} for {a.id}")

    def __len__(self):
        return len(self.achievements)

    def __iter__(self):
        return iter(self.achievements)

    def __contains__(self, ach_id):
        return ach_id in self.index

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(a.id for a in self.achievements)

    @property
    def index(self) -> dict[str, int]:
        return _index_of(self)

    def reward(self, ach_id: str) -> float:
        return self.achievements[self.index[ach_id]].reward

    def ordered(self, ids) -> list[str]:
        """Sort ids by registry position; unknown ids go last, alphabetically."""
        idx = self.index
        return sorted(ids, key=lambda a: (idx.get(a, len(idx)), a))

    def mask(self, ids) -> int:
        idx = self.index
        bits = 0
        for a in ids:
            bits |= 1 << idx[a]
        return bits

    def from_mask(self, bits: int) -> frozenset[str]:
        return frozenset(a.id for i, a in enumerate(self.achievements) if bits >> i & 1)

    def to_json(self) -> list[dict]:
        return [{"id": a.id, "reward": a.reward, "tier": a.tier} for a in self.achievements]

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def from_json(cls, data: list[dict]) -> "AchievementRegistry":
        return cls(tuple(Achievement(d["id"], float(d["reward"]), d["tier"]) for d in data))

    @classmethod
    def load(cls, path) -> "AchievementRegistry":
        return cls.from_json(json.loads(Path(path).read_text()))


@lru_cache(maxsize=None)
def _index_of(registry: AchievementRegistry) -> dict[str, int]:
    return {a.id: i for i, a in enumerate(registry.achievements)}


@lru_cache(maxsize=1)
def default_registry() -> AchievementRegistry:
    text = resources.files(__package__).joinpath("achievements.json").read_text()
    return AchievementRegistry.from_json(json.loads(text))
