"""Two-floor crafting gridworld with a hierarchical achievement chain.

States are immutable values: ``step`` returns a fresh ``WorldState`` and never
touches its input. All in-episode randomness comes from a counter-based
stream stored on the state, so ``(state, action)`` fully determines the
successor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .registry import (
    BLOCK_INDEX,
    ITEM_INDEX,
    MAP_COLS,
    MAP_ROWS,
    MOB_CAP,
    NUM_FLOORS,
    AchievementRegistry,
    default_registry,
)

GRASS, TREE, STONE, COAL, IRON, TABLE, FURNACE, LADDER, WALL, WATER = range(10)
WALKABLE = frozenset({GRASS, LADDER})

WOOD, STONE_ITEM, COAL_ITEM, IRON_ITEM, PICKAXE, SWORD = range(6)

ACTIONS = (
    "NOOP",
    "LEFT",
    "RIGHT",
    "UP",
    "DOWN",
    "INTERACT",
    "PLACE_TABLE",
    "MAKE_WOOD_PICKAXE",
    "MAKE_STONE_PICKAXE",
    "MAKE_IRON_SWORD",
    "DESCEND",
)
ACTION_INDEX = {name: i for i, name in enumerate(ACTIONS)}
NUM_ACTIONS = len(ACTIONS)
NOOP, LEFT, RIGHT, UP, DOWN, INTERACT = range(6)
PLACE_TABLE_A, MAKE_WOOD_PICKAXE_A, MAKE_STONE_PICKAXE_A, MAKE_IRON_SWORD_A, DESCEND_A = range(6, 11)

# facing index -> (drow, dcol); matches LEFT..DOWN minus one
DIRECTIONS = ((0, -1), (0, 1), (-1, 0), (1, 0))

COW, ZOMBIE, GUARD = range(3)
MOB_NAMES = ("COW", "ZOMBIE", "GUARD")
MELEE_KIND = (ZOMBIE, GUARD)  # per floor
MOB_HP = (3, 3, 9)
MOB_DAMAGE = (0, 1, 2)
MOB_COOLDOWN = (0, 6, 3)
MOB_TRIGGER = (0, 6, 24)  # guards always pursue on their floor
MOB_CHASE_P = (0.0, 0.6, 0.7)
MOB_WANDER_P = (0.3, 0.2, 0.0)
MELEE_SPAWN_P = (0.03, 0.005)
PASSIVE_SPAWN_P = (0.01, 0.0)
SWORD_DAMAGE = (1, 2, 3, 5)

MAX_HEALTH = 9
MAX_FOOD = 9
FOOD_PERIOD = 40
HEALTH_PERIOD = 10
COW_FOOD = 6
CRAFT_RADIUS = 2
SPAWN_MIN_DIST = 4

START = ((5, 5), (5, 5))  # player start cell per floor
DEFAULT_MAX_TIMESTEPS = 400

FLOOR_SIZE = MAP_ROWS * MAP_COLS
_MASK64 = (1 << 64) - 1


def cell_index(floor: int, row: int, col: int) -> int:
    return floor * FLOOR_SIZE + row * MAP_COLS + col


@dataclass(frozen=True)
class MechanicsParams:
    melee_spawn_multiplier: float = 1.0
    passive_spawn_multiplier: float = 1.0
    mob_damage_multiplier: float = 1.0
    needs_depletion_multiplier: float = 1.0
    monsters_killed_to_clear: int = 4


@dataclass(frozen=True, slots=True)
class WorldState:
    maps: bytes
    floor: int
    row: int
    col: int
    facing: int
    inventory: tuple
    health: int
    food: int
    mobs: tuple  # (kind, floor, row, col, hp, cooldown)
    achievements: int
    initial_achievements: int
    mechanics: MechanicsParams
    monsters_killed: tuple
    timestep: int
    rng_state: int
    max_timesteps: int = DEFAULT_MAX_TIMESTEPS

    @property
    def player(self) -> tuple[int, int, int, int]:
        return (self.floor, self.row, self.col, self.facing)

    def block(self, floor: int, row: int, col: int) -> int:
        return self.maps[cell_index(floor, row, col)]

    def grid(self, floor: int | None = None) -> np.ndarray:
        maps = np.frombuffer(self.maps, dtype=np.uint8).reshape(NUM_FLOORS, MAP_ROWS, MAP_COLS)
        return maps if floor is None else maps[floor]

    def item(self, name: str) -> int:
        return self.inventory[ITEM_INDEX[name]]

    def achieved(self, registry: AchievementRegistry | None = None) -> frozenset[str]:
        return (registry or default_registry()).from_mask(self.achievements)

    @property
    def ladder_open(self) -> bool:
        return self.monsters_killed[self.floor] >= self.mechanics.monsters_killed_to_clear

    @property
    def facing_cell(self) -> tuple[int, int]:
        dr, dc = DIRECTIONS[self.facing]
        return self.row + dr, self.col + dc

    def mob_at(self, floor: int, row: int, col: int):
        for m in self.mobs:
            if m[1] == floor and m[2] == row and m[3] == col:
                return m
        return None


@dataclass(frozen=True)
class Observation:
    """Full-floor view plus player status and the level's goal bits."""

    blocks: np.ndarray  # (rows, cols) block ids of the player's floor
    mobs: np.ndarray  # (rows, cols) 0 = empty, 1 + kind otherwise
    player: np.ndarray  # floor, row, col, facing
    inventory: np.ndarray
    health: int
    goal: np.ndarray  # multi-hot over the registry

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.blocks.ravel(),
                self.mobs.ravel(),
                self.player,
                self.inventory,
                [self.health],
                self.goal,
            ]
        ).astype(np.int16)


class _Stream:
    """SplitMix64 stream; the state is a plain int so it can live on a frozen value."""

    __slots__ = ("state",)

    def __init__(self, state: int):
        self.state = state

    def random(self) -> float:
        self.state = x = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return ((z ^ (z >> 31)) >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        return min(int(self.random() * n), n - 1)


def manhattan(r0: int, c0: int, r1: int, c1: int) -> int:
    return abs(r0 - r1) + abs(c0 - c1)


# ---------------------------------------------------------------------------
# procedural base layout
# ---------------------------------------------------------------------------


def base_layout(rng: np.random.Generator) -> tuple[bytearray, list]:
    """Draw the default two-floor world.

    The overworld keeps a fixed skeleton (forest west, quarry east, furnace and
    ladder in the middle band) with per-episode noise on every region, so a
    position-aware learner can generalise across layouts.
    """
    maps = bytearray(NUM_FLOORS * FLOOR_SIZE)
    g = np.full((NUM_FLOORS, MAP_ROWS, MAP_COLS), GRASS, dtype=np.uint8)
    g[:, 0, :] = g[:, -1, :] = WALL
    g[:, :, 0] = g[:, :, -1] = WALL

    f0 = g[0]
    rows = slice(1, MAP_ROWS - 1)
    f0[rows, 1:3] = np.where(rng.random((MAP_ROWS - 2, 2)) < 0.8, TREE, GRASS)
    f0[rows, 3] = np.where(rng.random(MAP_ROWS - 2) < 0.3, TREE, GRASS)
    # quarry: coal seams in its west face, iron one column deeper
    quarry = rng.random((MAP_ROWS - 2, 3))
    block = np.full((MAP_ROWS - 2, 3), STONE, dtype=np.uint8)
    block[:, 0][quarry[:, 0] < 0.3] = COAL
    block[:, 1][quarry[:, 1] < 0.3] = IRON
    block[:, 2][quarry[:, 2] < 0.1] = COAL
    f0[rows, 8:11] = block
    f0[4 + rng.integers(3), 8] = COAL
    f0[4 + rng.integers(3), 9] = IRON
    clutter = rng.random((MAP_ROWS - 2, 4))
    mid = f0[rows, 4:8]
    mid[clutter < 0.02] = TREE
    mid[(clutter >= 0.02) & (clutter < 0.04)] = STONE
    pond = rng.random(4) < 0.7
    for (r, c), wet in zip(((1, 5), (1, 6), (2, 5), (2, 6)), pond):
        if wet:
            f0[r, c] = WATER
    f0[7, 7] = FURNACE
    f0[10, 5] = LADDER

    f1 = g[1]
    pillars = rng.random((MAP_ROWS - 2, MAP_COLS - 2))
    inner = f1[1:-1, 1:-1]
    inner[pillars < 0.06] = STONE
    inner[(pillars >= 0.06) & (pillars < 0.08)] = COAL
    inner[(pillars >= 0.08) & (pillars < 0.09)] = IRON

    for floor, (r, c) in enumerate(START):
        g[floor, r, c] = GRASS
        # keep the start neighbourhood open so no level traps the player
        for dr, dc in DIRECTIONS:
            if g[floor, r + dr, c + dc] not in (WALL,):
                g[floor, r + dr, c + dc] = GRASS
    maps[:] = g.tobytes()

    mobs: list = []
    occupied = {(0, *START[0]), (1, *START[1])}
    for floor, kind, region in (
        (0, ZOMBIE, None),
        (0, COW, None),
        (1, GUARD, (7, 11, 7, 11)),
    ):
        cells = _free_cells(maps, floor, occupied, region, min_dist=SPAWN_MIN_DIST)
        if cells:
            r, c = cells[rng.integers(len(cells))]
            mobs.append((kind, floor, r, c, MOB_HP[kind], 0))
            occupied.add((floor, r, c))
    return maps, mobs


def _free_cells(maps, floor, occupied, region=None, min_dist=0):
    sr, sc = START[floor]
    r0, r1, c0, c1 = region or (1, MAP_ROWS - 1, 1, MAP_COLS - 1)
    out = []
    for r in range(r0, r1):
        for c in range(c0, c1):
            if (
                maps[cell_index(floor, r, c)] == GRASS
                and (floor, r, c) not in occupied
                and manhattan(r, c, sr, sc) >= min_dist
            ):
                out.append((r, c))
    return out


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


def near_block(maps: bytes, floor: int, row: int, col: int, block: int) -> bool:
    base = floor * FLOOR_SIZE
    for r in range(max(0, row - CRAFT_RADIUS), min(MAP_ROWS, row + CRAFT_RADIUS + 1)):
        off = base + r * MAP_COLS
        for c in range(max(0, col - CRAFT_RADIUS), min(MAP_COLS, col + CRAFT_RADIUS + 1)):
            if maps[off + c] == block:
                return True
    return False


def step(s: WorldState, action: int, registry: AchievementRegistry | None = None):
    """Advance one timestep.

    Returns ``(next_state, native_reward, newly_unlocked, done_native)``.
    Invalid actions are no-ops; the clock still advances.
    """
    registry = registry or default_registry()
    ids = registry.ids
    rs = _Stream(s.rng_state)
    maps = s.maps
    floor, row, col, facing = s.floor, s.row, s.col, s.facing
    inv = list(s.inventory)
    mobs = list(s.mobs)
    health, food = s.health, s.food
    killed = list(s.monsters_killed)
    mech = s.mechanics
    unlocked = 0
    idx = registry.index

    def unlock(name):
        nonlocal unlocked
        bit = 1 << idx[name]
        if not s.achievements & bit:
            unlocked |= bit

    if LEFT <= action <= DOWN:
        facing = action - LEFT
        dr, dc = DIRECTIONS[facing]
        nr, nc = row + dr, col + dc
        if maps[cell_index(floor, nr, nc)] in WALKABLE and not any(
            m[1] == floor and m[2] == nr and m[3] == nc for m in mobs
        ):
            row, col = nr, nc
    elif action == INTERACT:
        dr, dc = DIRECTIONS[facing]
        tr, tc = row + dr, col + dc
        hit = None
        for i, m in enumerate(mobs):
            if m[1] == floor and m[2] == tr and m[3] == tc:
                hit = i
                break
        if hit is not None:
            kind, mf, mr, mc, hp, cd = mobs[hit]
            hp -= SWORD_DAMAGE[inv[SWORD]]
            if hp <= 0:
                del mobs[hit]
                if kind == COW:
                    food = min(MAX_FOOD, food + COW_FOOD)
                else:
                    killed[floor] += 1
                    if kind == GUARD:
                        unlock("DEFEAT_GUARD")
            else:
                mobs[hit] = (kind, mf, mr, mc, hp, cd)
        else:
            ci = cell_index(floor, tr, tc)
            b = maps[ci]
            mined = None
            if b == TREE:
                inv[WOOD] = min(9, inv[WOOD] + 1)
                unlock("COLLECT_WOOD")
            elif b == STONE and inv[PICKAXE] >= 1:
                inv[STONE_ITEM] = min(9, inv[STONE_ITEM] + 1)
                unlock("COLLECT_STONE")
                mined = ci
            elif b == COAL and inv[PICKAXE] >= 1:
                inv[COAL_ITEM] = min(9, inv[COAL_ITEM] + 1)
                unlock("COLLECT_COAL")
                mined = ci
            elif b == IRON and inv[PICKAXE] >= 2:
                inv[IRON_ITEM] = min(9, inv[IRON_ITEM] + 1)
                unlock("COLLECT_IRON")
                mined = ci
            if mined is not None:
                buf = bytearray(maps)
                buf[mined] = GRASS
                maps = bytes(buf)
    elif action == PLACE_TABLE_A:
        dr, dc = DIRECTIONS[facing]
        tr, tc = row + dr, col + dc
        ci = cell_index(floor, tr, tc)
        if inv[WOOD] >= 1 and maps[ci] == GRASS and not any(
            m[1] == floor and m[2] == tr and m[3] == tc for m in mobs
        ):
            inv[WOOD] -= 1
            buf = bytearray(maps)
            buf[ci] = TABLE
            maps = bytes(buf)
            unlock("PLACE_TABLE")
    elif action == MAKE_WOOD_PICKAXE_A:
        if inv[PICKAXE] < 1 and inv[WOOD] >= 1 and near_block(maps, floor, row, col, TABLE):
            inv[WOOD] -= 1
            inv[PICKAXE] = 1
            unlock("MAKE_WOOD_PICKAXE")
    elif action == MAKE_STONE_PICKAXE_A:
        if inv[PICKAXE] < 2 and inv[WOOD] >= 1 and inv[STONE_ITEM] >= 1 and near_block(maps, floor, row, col, TABLE):
            inv[WOOD] -= 1
            inv[STONE_ITEM] -= 1
            inv[PICKAXE] = 2
            unlock("MAKE_STONE_PICKAXE")
    elif action == MAKE_IRON_SWORD_A:
        if (
            inv[SWORD] < 3
            and inv[WOOD] >= 1
            and inv[COAL_ITEM] >= 1
            and inv[IRON_ITEM] >= 1
            and near_block(maps, floor, row, col, FURNACE)
        ):
            inv[WOOD] -= 1
            inv[COAL_ITEM] -= 1
            inv[IRON_ITEM] -= 1
            inv[SWORD] = 3
            unlock("MAKE_IRON_SWORD")
    elif action == DESCEND_A:
        if (
            floor + 1 < NUM_FLOORS
            and maps[cell_index(floor, row, col)] == LADDER
            and killed[floor] >= mech.monsters_killed_to_clear
        ):
            floor += 1
            row, col = START[floor]
            mobs = [m for m in mobs if not (m[1] == floor and m[2] == row and m[3] == col)]
            unlock("DESCEND_FLOOR")

    # mobs on the player's floor act
    for i in range(len(mobs)):
        kind, mf, mr, mc, hp, cd = mobs[i]
        if mf != floor:
            continue
        if cd > 0:
            cd -= 1
        dist = abs(mr - row) + abs(mc - col)
        move = None
        if kind != COW and dist == 1:
            if cd == 0:
                health -= int(MOB_DAMAGE[kind] * mech.mob_damage_multiplier + 0.5)
                cd = MOB_COOLDOWN[kind]
        elif kind != COW and dist <= MOB_TRIGGER[kind]:
            if rs.random() < MOB_CHASE_P[kind]:
                if abs(row - mr) >= abs(col - mc):
                    move = (1 if row > mr else -1, 0)
                else:
                    move = (0, 1 if col > mc else -1)
        elif rs.random() < MOB_WANDER_P[kind]:
            move = DIRECTIONS[rs.below(4)]
        if move is not None:
            nr, nc = mr + move[0], mc + move[1]
            if (
                maps[cell_index(floor, nr, nc)] in WALKABLE
                and not (nr == row and nc == col)
                and not any(m[1] == floor and m[2] == nr and m[3] == nc for m in mobs)
            ):
                mr, mc = nr, nc
        mobs[i] = (kind, mf, mr, mc, hp, cd)

    _spawn(rs, maps, floor, row, col, mobs, MELEE_KIND[floor], MELEE_SPAWN_P[floor] * mech.melee_spawn_multiplier)
    _spawn(rs, maps, floor, row, col, mobs, COW, PASSIVE_SPAWN_P[floor] * mech.passive_spawn_multiplier)

    t = s.timestep + 1
    if mech.needs_depletion_multiplier > 0:
        period = max(1, int(FOOD_PERIOD / mech.needs_depletion_multiplier + 0.5))
        if t % period == 0:
            food = max(0, food - 1)
    if t % HEALTH_PERIOD == 0:
        health = min(MAX_HEALTH, health + 1) if food > 0 else health - 1
    health = max(0, health)

    achievements = s.achievements | unlocked
    reward = 0.0
    newly = frozenset()
    if unlocked:
        newly = frozenset(ids[i] for i in range(len(ids)) if unlocked >> i & 1)
        reward = sum(registry.achievements[idx[a]].reward for a in newly)
    nxt = WorldState(
        maps=maps,
        floor=floor,
        row=row,
        col=col,
        facing=facing,
        inventory=tuple(inv),
        health=health,
        food=food,
        mobs=tuple(mobs),
        achievements=achievements,
        initial_achievements=s.initial_achievements,
        mechanics=mech,
        monsters_killed=tuple(killed),
        timestep=t,
        rng_state=rs.state,
        max_timesteps=s.max_timesteps,
    )
    done = health <= 0 or t >= s.max_timesteps
    return nxt, reward, newly, done


def _spawn(rs, maps, floor, row, col, mobs, kind, p):
    if p <= 0 or rs.random() >= p:
        return
    if sum(1 for m in mobs if m[1] == floor and m[0] == kind) >= MOB_CAP:
        return
    occupied = {(m[1], m[2], m[3]) for m in mobs}
    occupied.add((floor, row, col))
    cells = [
        (r, c)
        for r in range(1, MAP_ROWS - 1)
        for c in range(1, MAP_COLS - 1)
        if maps[cell_index(floor, r, c)] == GRASS
        and (floor, r, c) not in occupied
        and abs(r - row) + abs(c - col) >= SPAWN_MIN_DIST
    ]
    if cells:
        r, c = cells[rs.below(len(cells))]
        mobs.append((kind, floor, r, c, MOB_HP[kind], 0))


# ---------------------------------------------------------------------------
# episode API
# ---------------------------------------------------------------------------


def derive_seed(episode_seed: int) -> int:
    return int(np.random.SeedSequence(episode_seed).generate_state(1, dtype=np.uint64)[0] >> 1)


def reset(program, episode_seed: int, max_timesteps: int = DEFAULT_MAX_TIMESTEPS, registry=None):
    """Compile ``program`` for a fresh episode; returns ``(state, observation)``."""
    from .dsl import compile_program

    state = compile_program(program, derive_seed(episode_seed), max_timesteps=max_timesteps, registry=registry)
    return state, encode_observation(state, program.goal, registry)


def wrapped_reward(
    native_reward: float,
    newly_unlocked,
    s: WorldState,
    goal,
    bonus: float,
    registry: AchievementRegistry | None = None,
) -> tuple[float, bool]:
    """Reward for generated levels: native reward with already-satisfied
    achievements masked out, plus ``bonus`` on the step the goal completes."""
    if bonus < 0:
        raise ValueError("bonus must be non-negative")
    registry = registry or default_registry()
    idx = registry.index
    reward = native_reward
    for a in newly_unlocked:
        if s.initial_achievements >> idx[a] & 1:
            reward -= registry.achievements[idx[a]].reward
    goal_bits = registry.mask(goal)
    success = s.achievements & goal_bits == goal_bits
    if success:
        reward += bonus
    return reward, success


def encode_observation(s: WorldState, goal, registry: AchievementRegistry | None = None) -> Observation:
    registry = registry or default_registry()
    mobs = np.zeros((MAP_ROWS, MAP_COLS), dtype=np.int16)
    for kind, mf, mr, mc, _hp, _cd in s.mobs:
        if mf == s.floor:
            mobs[mr, mc] = 1 + kind
    goal_vec = np.zeros(len(registry), dtype=np.int16)
    for a in goal:
        goal_vec[registry.index[a]] = 1
    return Observation(
        blocks=s.grid(s.floor).astype(np.int16),
        mobs=mobs,
        player=np.array(s.player, dtype=np.int16),
        inventory=np.array(s.inventory, dtype=np.int16),
        health=s.health,
        goal=goal_vec,
    )


def block_id(name: str) -> int:
    return BLOCK_INDEX[name]
