"""The student: goal-conditioned tabular Q-learning, batch planning, bonus schedule
and held-out evaluation.

The action-value function has two layers. ``T`` is keyed by (goal bits, state)
and is only written for the goal of the level being played. ``U`` is a
goal-agnostic table trained on every transition with the masked native reward;
it seeds new ``T`` rows and answers lookups for states a goal has not visited
yet, which is how skills learned on curriculum levels reach the target task.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import world
from .registry import MAP_COLS, MAP_ROWS, NUM_FLOORS, AchievementRegistry, default_registry

logger = logging.getLogger(__name__)

TARGET = "Target"

# ---------------------------------------------------------------------------
# state abstraction
# ---------------------------------------------------------------------------

MATERIAL_CLAMP = 2
THREAT_RADIUS = 2
_FACED_CODES = 10 + 3 + 1  # block id, mob kind, out of bounds
_MOB_CODES = 19  # none, or (sign dr, sign dc) x adjacent
_KILL_CODES = 5


def _sign(x: int) -> int:
    return (x > 0) - (x < 0)


def state_key(s: world.WorldState, registry: AchievementRegistry | None = None) -> int:
    """Integer hash of the features the learner conditions on.

    Position and floor, the cell being faced (block or mob), the bearing of the
    nearest melee mob within ``THREAT_RADIUS``, material counts clamped to 0..2,
    exact tool tiers, whether a table is within crafting reach and kills still needed to open the ladder (0..4).
    Achievement history is left out so levels that pre-complete part of the
    chain share states with levels that do not.
    """
    floor, row, col = s.floor, s.row, s.col
    fr, fc = s.facing_cell
    faced = 13
    if 0 <= fr < MAP_ROWS and 0 <= fc < MAP_COLS:
        faced = s.maps[world.cell_index(floor, fr, fc)]
    nearest = None
    best = 1 << 30
    for kind, mf, mr, mc, _hp, _cd in s.mobs:
        if mf != floor:
            continue
        if fr == mr and fc == mc:
            faced = 10 + kind
        if kind == world.COW:
            continue
        dist = abs(mr - row) + abs(mc - col)
        if dist <= THREAT_RADIUS and dist < best:
            best, nearest = dist, (mr, mc)
    if nearest is None:
        mob = 0
    else:
        mob = 1 + (_sign(nearest[0] - row) + 1) * 3 + (_sign(nearest[1] - col) + 1) + (9 if best == 1 else 0)
    inv = s.inventory
    need = s.mechanics.monsters_killed_to_clear - s.monsters_killed[floor] if floor + 1 < NUM_FLOORS else 0
    kills = min(max(need, 0), _KILL_CODES - 1)

    key = floor
    key = key * MAP_ROWS + row
    key = key * MAP_COLS + col
    key = key * _FACED_CODES + faced
    key = key * _MOB_CODES + mob
    for i in range(4):
        key = key * (MATERIAL_CLAMP + 1) + min(inv[i], MATERIAL_CLAMP)
    key = key * 4 + inv[world.PICKAXE]
    key = key * 4 + inv[world.SWORD]
    key = key * 2 + world.near_block(s.maps, floor, row, col, world.TABLE)
    key = key * _KILL_CODES + kills
    return key


# ---------------------------------------------------------------------------
# action values
# ---------------------------------------------------------------------------

POLICY_MAGIC = b"CCQT"
POLICY_VERSION = 1
_HEADER = struct.Struct("<4sHHddQQ")


class PolicyTable:
    """Two-layer tabular Q function; see the module docstring."""

    def __init__(self, n_actions: int = world.NUM_ACTIONS, alpha: float = 0.1, gamma: float = 0.99):
        if not 0.0 < alpha <= 1.0 or not 0.0 < gamma <= 1.0:
            raise ValueError("alpha and gamma must lie in (0, 1]")
        self.n_actions = n_actions
        self.alpha = alpha
        self.gamma = gamma
        self.T: dict[tuple[int, int], np.ndarray] = {}
        self.U: dict[int, np.ndarray] = {}
        self._zeros = np.zeros(n_actions)
        self._zeros.flags.writeable = False

    def values(self, goal: int, key: int) -> np.ndarray:
        row = self.T.get((goal, key))
        if row is None:
            row = self.U.get(key, self._zeros)
        return row

    def greedy(self, goal: int, key: int, rng: np.random.Generator, repeats=None, penalty: float = 0.0) -> int:
        """Best action, ties broken at random.

        ``repeats`` counts how often each action was already taken from this
        state in the current episode; each repeat costs ``penalty``, which
        breaks the endless loops a greedy tabular policy otherwise falls into
        on actions that leave the state unchanged.
        """
        q = self.values(goal, key)
        if repeats is not None and penalty:
            q = q - penalty * repeats
        best = np.flatnonzero(q == q.max())
        return int(best[0]) if len(best) == 1 else int(best[rng.integers(len(best))])

    def act(self, goal, key, epsilon, rng, repeats=None, penalty: float = 0.0) -> int:
        if epsilon > 0 and rng.random() < epsilon:
            return int(rng.integers(self.n_actions))
        return self.greedy(goal, key, rng, repeats, penalty)

    def update(
        self,
        goal: int,
        key: int,
        action: int,
        reward: float,
        next_key: int,
        terminal: bool,
        *,
        shared_reward: float | None = None,
        shared_terminal: bool | None = None,
    ) -> None:
        """One Q-learning step on ``T[goal]``; also on ``U`` when ``shared_reward`` is given."""
        g = self.gamma
        if shared_reward is not None:
            u = self.U.get(key)
            if u is None:
                u = self.U[key] = np.zeros(self.n_actions)
            nxt = self.U.get(next_key)
            boot = 0.0 if shared_terminal or nxt is None else g * nxt.max()
            u[action] += self.alpha * (shared_reward + boot - u[action])
        row = self.T.get((goal, key))
        if row is None:
            base = self.U.get(key)
            row = self.T[(goal, key)] = base.copy() if base is not None else np.zeros(self.n_actions)
        boot = 0.0 if terminal else g * self.values(goal, next_key).max()
        row[action] += self.alpha * (reward + boot - row[action])

    # -- persistence --------------------------------------------------------

    def to_bytes(self) -> bytes:
        """Little-endian dump: header, then sorted T rows, then sorted U rows.

        Header: magic ``CCQT``, u16 version, u16 action count, f64 alpha,
        f64 gamma, u64 |T|, u64 |U|. A T row is u32 goal bits, u64 state key,
        then one f64 per action; a U row omits the goal bits.
        """
        parts = [
            _HEADER.pack(POLICY_MAGIC, POLICY_VERSION, self.n_actions, self.alpha, self.gamma, len(self.T), len(self.U))
        ]
        for goal, key in sorted(self.T):
            parts.append(struct.pack("<IQ", goal, key))
            parts.append(self.T[(goal, key)].astype("<f8").tobytes())
        for key in sorted(self.U):
            parts.append(struct.pack("<Q", key))
            parts.append(self.U[key].astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PolicyTable":
        if len(data) < _HEADER.size:
            raise ValueError("policy file truncated")
        magic, version, n_actions, alpha, gamma, n_t, n_u = _HEADER.unpack_from(data, 0)
        if magic != POLICY_MAGIC:
            raise ValueError("not a policy file")
        if version != POLICY_VERSION:
            raise ValueError(f"unsupported policy version {version}")
        table = cls(n_actions, alpha, gamma)
        off = _HEADER.size
        width = 8 * n_actions
        expected = off + n_t * (12 + width) + n_u * (8 + width)
        if len(data) != expected:
            raise ValueError("policy file has the wrong length")
        for _ in range(n_t):
            goal, key = struct.unpack_from("<IQ", data, off)
            off += 12
            table.T[(goal, key)] = np.frombuffer(data, "<f8", n_actions, off).astype(float)
            off += width
        for _ in range(n_u):
            (key,) = struct.unpack_from("<Q", data, off)
            off += 8
            table.U[key] = np.frombuffer(data, "<f8", n_actions, off).astype(float)
            off += width
        return table

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PolicyTable":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def check_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.T.values()) and all(
            np.isfinite(v).all() for v in self.U.values()
        )


@dataclass
class EpsilonSchedule:
    """Linear decay from ``start`` to ``end`` over the first ``decay_steps`` env steps."""

    start: float = 1.0
    end: float = 0.05
    decay_steps: int = 100_000

    def __call__(self, env_steps: int) -> float:
        if self.decay_steps <= 0 or env_steps >= self.decay_steps:
            return self.end
        return self.start + (self.end - self.start) * env_steps / self.decay_steps

    @classmethod
    def from_config(cls, config) -> "EpsilonSchedule":
        return cls(
            config.epsilon_start,
            config.epsilon_end,
            int(config.epsilon_decay_fraction * config.budget_steps),
        )


# ---------------------------------------------------------------------------
# bonus schedule
# ---------------------------------------------------------------------------


def update_bonus(r_prev: float, d: float = 1.0) -> float:
    return max(d, 2.0 * r_prev)


@dataclass
class BonusState:
    d: float = 1.0
    last_return: float = 0.0
    bonus: float = 1.0

    def __post_init__(self):
        self.bonus = update_bonus(self.last_return, self.d)

    def update(self, r_prev: float) -> float:
        self.last_return = r_prev
        self.bonus = update_bonus(r_prev, self.d)
        return self.bonus


# ---------------------------------------------------------------------------
# batch planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Slot:
    source: str  # "Target", "New" or "Replay"
    node: int | None
    episodes: int


@dataclass(frozen=True)
class BatchPlan:
    cycle: int
    slots: tuple

    def count(self, source: str) -> int:
        return sum(s.episodes for s in self.slots if s.source == source)

    def uniques(self, source: str) -> set:
        return {s.node for s in self.slots if s.source == source}

    @property
    def total(self) -> int:
        return sum(s.episodes for s in self.slots)


def _spread(total: int, ids: list) -> list[tuple]:
    """Split ``total`` episodes over ``ids`` as evenly as possible, earlier ids first."""
    if not ids or total <= 0:
        return []
    base, extra = divmod(total, len(ids))
    return [(i, base + (1 if j < extra else 0)) for j, i in enumerate(ids) if base + (1 if j < extra else 0) > 0]


def plan_batch(cycle: int, new_levels, archive, config, rng: np.random.Generator | None = None) -> BatchPlan:
    """Stratify one cycle's episodes across Target, New and Replay sources.

    With fresh levels the split is target/new/replay fractions over
    ``num_unique_new`` new and ``num_unique_replay`` replayed levels; without,
    the non-target share all goes to replay over up to
    ``num_unique_replay_no_new`` levels. Replay share with nothing to replay
    folds into Target.
    """
    rng = rng if rng is not None else np.random.default_rng(cycle)
    total = config.updates_per_cycle
    n_target = int(round(total * config.target_fraction))
    new_ids = list(new_levels)[: config.num_unique_new]
    slots = []
    if new_ids:
        n_new = int(round(total * config.new_fraction))
        n_new = min(n_new, total - n_target)
        k_replay = config.num_unique_replay
    else:
        n_new = 0
        k_replay = config.num_unique_replay_no_new
    n_replay = total - n_target - n_new
    replay_ids = []
    if n_replay > 0:
        candidates = [i for i in archive.active_ids if i not in set(new_ids)] if archive is not None else []
        if candidates:
            replay_ids = archive.sample_replay(min(k_replay, n_replay), rng, exclude=new_ids)
        else:
            logger.info("cycle %d: nothing to replay, folding %d episodes into Target", cycle, n_replay)
            n_target += n_replay
            n_replay = 0
    if n_target:
        slots.append(Slot(TARGET, None, n_target))
    slots.extend(Slot("New", i, n) for i, n in _spread(n_new, new_ids))
    slots.extend(Slot("Replay", i, n) for i, n in _spread(n_replay, replay_ids))
    return BatchPlan(cycle, tuple(slots))


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass
class EpisodeStats:
    source: object  # node id or TARGET
    success: bool
    ret: float
    unlocked: frozenset
    steps: int
    degenerate: bool = False
    native_return: float = 0.0
    achievements: frozenset = field(default_factory=frozenset)


def run_episode(
    program,
    policy: PolicyTable,
    bonus: float,
    rng: np.random.Generator,
    *,
    episode_seed: int,
    epsilon: float | EpsilonSchedule = 0.0,
    env_steps: int = 0,
    is_target: bool = False,
    max_timesteps: int = world.DEFAULT_MAX_TIMESTEPS,
    learn: bool = True,
    sweeps: int = 1,
    repeat_penalty: float = 0.1,
    source=None,
    registry: AchievementRegistry | None = None,
) -> EpisodeStats:
    """Play one episode, applying Q-learning updates unless ``learn`` is false.

    Generated levels pay the wrapped reward (masked native plus ``bonus`` on
    goal completion, which ends the episode). Target episodes pay native
    reward only and end on death, timeout, or once every goal achievement is
    unlocked. After the episode its transitions are replayed ``sweeps`` more
    times, last step first, so reward reaches early states in one episode.
    """
    registry = registry or default_registry()
    state = world.reset(program, episode_seed, max_timesteps, registry)[0]
    goal_bits = registry.mask(program.goal)
    source = TARGET if is_target and source is None else source
    if state.achievements & goal_bits == goal_bits:
        logger.warning("level %s is solved at reset; paying the bonus and stopping", program.name)
        paid = 0.0 if is_target else bonus
        return EpisodeStats(source, True, paid, frozenset(), 0, True, 0.0, state.achieved(registry))
    sched = epsilon if callable(epsilon) else None
    key = state_key(state, registry)
    ret = native_ret = 0.0
    steps = 0
    success = False
    initial = state.initial_achievements
    trace = []
    visits: dict[int, np.ndarray] = {}
    while True:
        eps = sched(env_steps + steps) if sched else epsilon
        repeats = visits.get(key)
        if repeats is None:
            repeats = visits[key] = np.zeros(policy.n_actions)
        action = policy.act(goal_bits, key, eps, rng, repeats, repeat_penalty)
        repeats[action] += 1
        nxt, native, newly, done_native = world.step(state, action, registry)
        steps += 1
        masked = native
        if newly and initial:
            masked -= sum(registry.reward(a) for a in newly if initial >> registry.index[a] & 1)
        success = nxt.achievements & goal_bits == goal_bits
        reward = masked if is_target else masked + (bonus if success else 0.0)
        died = nxt.health <= 0
        next_key = state_key(nxt, registry)
        if learn:
            transition = (goal_bits, key, action, reward, next_key, died or success, masked, died)
            policy.update(*transition[:6], shared_reward=masked, shared_terminal=died)
            trace.append(transition)
        ret += reward
        native_ret += masked
        state, key = nxt, next_key
        if success or done_native:
            break
    for _ in range(sweeps if learn else 0):
        for transition in reversed(trace):
            policy.update(*transition[:6], shared_reward=transition[6], shared_terminal=transition[7])
    unlocked = registry.from_mask(state.achievements & ~initial)
    return EpisodeStats(source, bool(success), ret, unlocked, steps, False, native_ret, state.achieved(registry))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

EVAL_SEED_BASE = 1 << 32  # training seeds stay below 2**31


def eval_seeds(n: int, offset: int = 0) -> list[int]:
    return [EVAL_SEED_BASE + offset + i for i in range(n)]


def evaluate_target(
    policy: PolicyTable,
    target_program,
    seeds,
    *,
    max_timesteps: int = world.DEFAULT_MAX_TIMESTEPS,
    registry: AchievementRegistry | None = None,
) -> tuple[float, dict[str, float]]:
    """Greedy rollouts with no learning and no bonus.

    Returns the mean undiscounted return and, per achievement, the fraction
    of episodes that unlocked it.
    """
    registry = registry or default_registry()
    seeds = list(seeds)
    if not seeds:
        raise ValueError("evaluation needs at least one seed")
    returns = []
    counts = dict.fromkeys(registry.ids, 0)
    for seed in seeds:
        if seed < EVAL_SEED_BASE:
            raise ValueError(f"evaluation seed {seed} overlaps the training seed range")
        stats = run_episode(
            target_program,
            policy,
            0.0,
            np.random.default_rng(seed),
            episode_seed=seed,
            epsilon=0.0,
            is_target=True,
            max_timesteps=max_timesteps,
            learn=False,
            registry=registry,
        )
        returns.append(stats.ret)
        for a in stats.unlocked:
            counts[a] += 1
    n = len(seeds)
    return float(np.mean(returns)), {a: counts[a] / n for a in registry.ids}


def run_baseline(mode: str, budget: int, config, rng_seed: int, **kwargs):
    """Train a non-generative baseline (``target-only``, ``dr`` or ``plr``) and return its metrics."""
    from .pipeline import Mode, run_training

    mode = Mode.parse(mode)
    if mode not in (Mode.TARGET_ONLY, Mode.DR, Mode.PLR):
        raise ValueError(f"{mode.value} is not a baseline mode")
    return run_training(config.replace(budget_steps=budget), mode, rng_seed, **kwargs).metrics

