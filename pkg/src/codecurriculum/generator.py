"""Level synthesis: a description is dreamed first, then a program is written
against it, then every candidate goes through a compile check.

Two backends implement the two phases. ``MutationBackend`` edits the parent
program with a fixed intent table and is fully deterministic given its rng;
``RemoteBackend`` asks an OpenAI-compatible chat endpoint.
"""

from __future__ import annotations

import logging
import math
import os
import re
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace

import httpx
import numpy as np

from . import world
from .archive import Archive, Status
from .dsl import (
    Annulus,
    CompileError,
    LevelProgram,
    ParseError,
    PlacementSpec,
    SemanticError,
    parse,
    serialize,
    validate,
)
from .registry import MECHANICS_DEFAULTS, AchievementRegistry, default_registry
from .world import MechanicsParams

logger = logging.getLogger(__name__)

INTENTS = ("persist", "simplify", "expand", "vary")
CLEAR_COUNT = "monsters_killed_to_clear"
# mechanics whose lower values make a level easier
SOFTENABLE = ("melee_spawn_multiplier", "mob_damage_multiplier", "needs_depletion_multiplier", CLEAR_COUNT)
MULTIPLIERS = tuple(k for k in MECHANICS_DEFAULTS if k.endswith("_multiplier"))
TUNABLE = MULTIPLIERS + (CLEAR_COUNT,)


class BackendError(RuntimeError):
    """The backend timed out or replied with something unusable."""


# ---------------------------------------------------------------------------
# context
# ---------------------------------------------------------------------------

DOMAIN_CONTEXT_1 = """\
World: two floors of 12x12 cells. The overworld has a forest to the west, a
quarry to the east (stone, coal seams, iron one column deeper), a furnace at
(7, 7) and a ladder at (10, 5); the player starts at (5, 5). Zombies roam the
overworld, guards wait downstairs. Achievements unlock in this order:
{chain}. Tools: a table needs 1 wood; a wood pickaxe needs a nearby table and
1 wood; a stone pickaxe adds 1 stone; an iron sword needs the furnace, 1 wood,
1 coal and 1 iron. Stone and coal need a wood pickaxe, iron a stone pickaxe.
The ladder opens after enough zombie kills."""

DOMAIN_CONTEXT_2 = """\
Levels are written in a small block language:
  level "name" {
    floor = INT
    inventory { item = INT; ... }
    place { block = BLOCK; [on { BLOCK, ... }] at (ROW, COL) | near { min = INT; max = INT; n = INT } }
    mob { kind = passive|melee; n = INT; near { ... } }
    mechanics { key = NUMBER; ... }
    goal { ACHIEVEMENT, ... }
    completed { ACHIEVEMENT, ... }
  }
Distances are Manhattan from the player start. Items: wood, stone, coal,
iron, pickaxe (tier 1-3), sword (tier 1-3)."""

MUTATION_INSTRUCTIONS_1 = """\
Propose one small, incremental change to the parent level. Choose an intent:
persist (same goal, softer mechanics), simplify (move a goal achievement into
the completed set and add scaffolding), expand (add the next achievement and
remove one piece of scaffolding) or vary (same goal, new layout). Start your
answer with the lines `intent=<intent>` and `goal=<ids>` inside <docstring>
tags, then explain the change."""

MUTATION_INSTRUCTIONS_2 = """\
Write the level described above as a program in the block language, inside
<code> tags. Keep every part of the parent that the description does not
change."""

OPEN_LOOP_INSTRUCTIONS_1 = """\
Pick a capability that might be a bottleneck for an agent in this world and
design a level that trains it. Start your answer with the lines
`intent=<intent>` and `goal=<ids>` inside <docstring> tags, then explain."""

OPEN_LOOP_INSTRUCTIONS_2 = """\
Write the level described above as a program in the block language, inside
<code> tags."""


@dataclass(frozen=True)
class PerformanceProfile:
    goal_success_rate: float
    per_achievement_sr: dict = field(default_factory=dict)

    def __post_init__(self):
        rates = [self.goal_success_rate, *self.per_achievement_sr.values()]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError("success rates must lie in [0, 1]")

    def render(self) -> str:
        lines = [f"goal success rate: {self.goal_success_rate:.2f}"]
        lines += [f"  {a}: {r:.2f}" for a, r in self.per_achievement_sr.items()]
        return "\n".join(lines)


@dataclass(frozen=True)
class GenerationContext:
    domain_context_1: str
    domain_context_2: str
    mutation_instructions_1: str
    mutation_instructions_2: str
    few_shot: tuple = ()
    open_loop: bool = False
    target_perf: PerformanceProfile | None = None
    parent_program: LevelProgram | None = None
    parent_perf: PerformanceProfile | None = None
    parent_status: Status | None = None
    parent_id: int | None = None
    intent_override: str | None = None

    def __post_init__(self):
        if self.open_loop and (
            self.parent_program is not None
            or self.parent_perf is not None
            or self.parent_status is not None
            or self.target_perf is not None
        ):
            raise ValueError("open-loop contexts carry no parent and no performance feedback")
        if self.intent_override is not None and self.intent_override not in INTENTS:
            raise ValueError(f"unknown intent {self.intent_override!r}")


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def _skills(p: LevelProgram) -> set:
    return set(p.goal) | set(p.completed)


def select_few_shot(parent: int | None, archive: Archive, k: int) -> tuple[int, ...]:
    """Ids of the ``k`` archived programs most similar to the parent (Jaccard over
    goal and completed sets, ties by id). Without a parent, the first ``k`` ids."""
    others = [i for i in archive.ids if i != parent]
    if parent is None:
        return tuple(others[:k])
    ref = _skills(archive[parent].program)
    ranked = sorted(others, key=lambda i: (-jaccard(ref, _skills(archive[i].program)), i))
    return tuple(ranked[:k])


def build_context(
    parent: int | None,
    archive: Archive,
    *,
    few_shot_k: int = 2,
    open_loop: bool = False,
    target_perf: PerformanceProfile | None = None,
    intent_override: str | None = None,
) -> GenerationContext:
    registry = archive.registry
    ctx1 = DOMAIN_CONTEXT_1.format(chain=" -> ".join(registry.ids))
    if open_loop:
        shots = select_few_shot(None, archive, few_shot_k)
        return GenerationContext(
            ctx1,
            DOMAIN_CONTEXT_2,
            OPEN_LOOP_INSTRUCTIONS_1,
            OPEN_LOOP_INSTRUCTIONS_2,
            few_shot=tuple(archive[i].program for i in shots),
            open_loop=True,
            intent_override=intent_override,
        )
    if parent is None:
        raise ValueError("closed-loop generation needs a parent")
    node = archive[parent]
    shots = select_few_shot(parent, archive, few_shot_k)
    perf = PerformanceProfile(archive.success_rate(parent) or 0.0, archive.achievement_rates(parent))
    return GenerationContext(
        ctx1,
        DOMAIN_CONTEXT_2,
        MUTATION_INSTRUCTIONS_1,
        MUTATION_INSTRUCTIONS_2,
        few_shot=tuple(archive[i].program for i in shots),
        target_perf=target_perf,
        parent_program=node.program,
        parent_perf=perf,
        parent_status=archive.status(parent),
        parent_id=parent,
        intent_override=intent_override,
    )


# ---------------------------------------------------------------------------
# descriptions
# ---------------------------------------------------------------------------

_HEADER_RE = re.compile(r"^\s*(intent|goal)\s*=\s*(.*?)\s*$", re.MULTILINE)


@dataclass(frozen=True)
class Description:
    intent: str
    goal: tuple
    text: str


def parse_description(text: str) -> Description:
    fields_ = dict(m.groups() for m in _HEADER_RE.finditer(text))
    intent = fields_.get("intent", "").lower()
    if intent not in INTENTS:
        raise BackendError(f"description names no valid intent (got {intent!r})")
    goal = tuple(g.strip() for g in fields_.get("goal", "").split(",") if g.strip())
    if not goal:
        raise BackendError("description names no goal")
    return Description(intent, goal, text)


def format_description(intent: str, goal, prose: str) -> str:
    return f"intent={intent}\ngoal={','.join(goal)}\n\n{prose.strip()}\n"


def choose_intent(ctx: GenerationContext) -> str:
    """Intent table for the deterministic backend.

    A -> expand. B with any goal achievement below 0.25 on the level -> persist.
    B otherwise -> vary. Anything weaker (only reachable by override or
    direct calls) -> simplify; an unscored parent -> vary.
    """
    if ctx.intent_override:
        return ctx.intent_override
    status = ctx.parent_status
    if status is Status.A:
        return "expand"
    if status is Status.B:
        rates = ctx.parent_perf.per_achievement_sr if ctx.parent_perf else {}
        goal = ctx.parent_program.goal
        if any(rates.get(a, 0.0) < 0.25 for a in goal):
            return "persist"
        return "vary"
    if status in (Status.C, Status.D):
        return "simplify"
    return "vary"


# ---------------------------------------------------------------------------
# scaffolding and mutation operators
# ---------------------------------------------------------------------------


def scaffold_for(completed, registry: AchievementRegistry | None = None):
    """Inventory and placements that stand in for having done ``completed``.

    Returns ``(inventory, placements, floor)``.
    """
    registry = registry or default_registry()
    done = set(completed)
    inv: dict[str, int] = {}
    placements = []
    floor = 0
    if "MAKE_IRON_SWORD" in done:
        inv["sword"] = 3
    if "MAKE_STONE_PICKAXE" in done:
        inv["pickaxe"] = 2
    elif "MAKE_WOOD_PICKAXE" in done:
        inv["pickaxe"] = 1
    if "COLLECT_IRON" in done and "MAKE_IRON_SWORD" not in done:
        inv["iron"] = 1
    if "COLLECT_COAL" in done and "MAKE_IRON_SWORD" not in done:
        inv["coal"] = 1
    if "COLLECT_STONE" in done and "MAKE_STONE_PICKAXE" not in done:
        inv["stone"] = 1
    if "COLLECT_WOOD" in done and "MAKE_IRON_SWORD" not in done:
        inv["wood"] = 2
    if "PLACE_TABLE" in done and "MAKE_STONE_PICKAXE" not in done:
        placements.append(PlacementSpec("TABLE", Annulus(1, 2, 1)))
    if "DESCEND_FLOOR" in done:
        floor = 1
    return inv, placements, floor


def _scaffolding(p: LevelProgram) -> list[tuple[str, object]]:
    items = [("inventory", k) for k in sorted(p.inventory_overrides)]
    items += [("placement", i) for i in range(len(p.placements))]
    items += [("mechanics", k) for k in SOFTENABLE if getattr(p.mechanics, k) < MECHANICS_DEFAULTS[k]]
    return items


def _harden(p: LevelProgram, key: str) -> LevelProgram:
    """Undo one softening step: double the value, capped at the default."""
    value, default = getattr(p.mechanics, key), MECHANICS_DEFAULTS[key]
    if key == CLEAR_COUNT:
        new = min(default, max(value + 1, 2 * value))
    else:
        new = default if value <= 0 else min(default, round(value * 2, 4))
    return p.with_changes(mechanics=replace(p.mechanics, **{key: new}))


def _remove_scaffolding(p: LevelProgram, rng: np.random.Generator) -> LevelProgram:
    options = _scaffolding(p)
    if not options:
        return p
    kind, which = options[rng.integers(len(options))]
    if kind == "mechanics":
        return _harden(p, which)
    if kind == "inventory":
        inv = dict(p.inventory_overrides)
        del inv[which]
        return p.with_changes(inventory_overrides=inv)
    placements = tuple(pl for i, pl in enumerate(p.placements) if i != which)
    return p.with_changes(placements=placements)


def _add_scaffolding(p: LevelProgram, rng: np.random.Generator, registry) -> LevelProgram:
    inv, placements, _ = scaffold_for(p.completed, registry)
    options = [("inventory", k, v) for k, v in sorted(inv.items()) if p.inventory_overrides.get(k, 0) < v]
    if not any(pl.block == "TABLE" for pl in p.placements):
        options += [("placement", pl, None) for pl in placements]
    if not options:
        return _scale_multiplier(p, rng, SOFTENABLE, 0.5)
    kind, what, value = options[rng.integers(len(options))]
    if kind == "inventory":
        return p.with_changes(inventory_overrides={**p.inventory_overrides, what: value})
    return p.with_changes(placements=p.placements + (what,))


def _scale_multiplier(p: LevelProgram, rng, keys, factor: float) -> LevelProgram:
    key = keys[rng.integers(len(keys))]
    value = getattr(p.mechanics, key)
    if key == CLEAR_COUNT:
        new = round(value * factor)
        if new == value and value > 0:
            new = value + (1 if factor > 1 else -1)
        new = max(0, int(new))
    else:
        new = round(value * factor, 4)
    return p.with_changes(mechanics=replace(p.mechanics, **{key: new}))


def _reseed_placements(p: LevelProgram, rng) -> LevelProgram:
    def shift(region):
        if not isinstance(region, Annulus):
            return region
        lo = max(1, region.min_dist + int(rng.integers(-1, 2)))
        hi = max(lo, region.max_dist + int(rng.integers(-1, 2)))
        return Annulus(lo, hi, region.n)

    placements = tuple(replace(pl, region=shift(pl.region)) for pl in p.placements)
    mobs = tuple(replace(m, region=shift(m.region)) for m in p.mob_placements)
    return p.with_changes(placements=placements, mob_placements=mobs)


def next_achievement(p: LevelProgram, registry: AchievementRegistry) -> str | None:
    top = max(registry.index[a] for a in p.goal)
    taken = set(p.goal) | set(p.completed)
    for a in registry.ids[top + 1 :]:
        if a not in taken:
            return a
    return None


def _child_name(parent: LevelProgram, intent: str, rng) -> str:
    root = parent.name.split("~")[0]
    return f"{root}~{intent}{int(rng.integers(1_000_000)):06d}"


def mutate(p: LevelProgram, intent: str, rng: np.random.Generator, registry=None) -> LevelProgram:
    """Apply one mutation operator; the result keeps goal nonempty and disjoint from completed."""
    registry = registry or default_registry()
    if intent == "expand":
        nxt = next_achievement(p, registry)
        child = p
        if nxt is not None:
            child = p.with_changes(goal=frozenset(p.goal) | {nxt})
        child = _remove_scaffolding(child, rng)
    elif intent == "simplify":
        child = p
        if len(p.goal) > 1:
            first = registry.ordered(p.goal)[0]
            child = p.with_changes(goal=frozenset(p.goal) - {first}, completed=frozenset(p.completed) | {first})
        child = _add_scaffolding(child, rng, registry)
    elif intent == "persist":
        child = _scale_multiplier(p, rng, SOFTENABLE, 0.5)
    elif intent == "vary":
        child = _reseed_placements(p, rng)
        child = _scale_multiplier(child, rng, TUNABLE, 1.25 if rng.random() < 0.5 else 0.75)
    else:
        raise ValueError(f"unknown intent {intent!r}")
    return child.with_changes(name=_child_name(p, intent, rng))


def random_level(rng: np.random.Generator, registry: AchievementRegistry | None = None, name: str = "random") -> LevelProgram:
    """A level built from scratch: a random bottleneck achievement (sometimes
    with its successor), a random share of its prerequisites scaffolded, and
    randomly scaled mechanics."""
    registry = registry or default_registry()
    ids = registry.ids
    i = int(rng.integers(len(ids)))
    goal = {ids[i]}
    if i + 1 < len(ids) and rng.random() < 0.5:
        goal.add(ids[i + 1])
    cut = int(rng.integers(0, i + 1))
    completed = set(ids[:cut])
    inv, placements, floor = scaffold_for(completed, registry)
    mech = {}
    for key in MULTIPLIERS:
        if rng.random() < 0.5:
            mech[key] = round(float(rng.uniform(0.5, 1.5)), 2)
    if "DESCEND_FLOOR" in goal and rng.random() < 0.5:
        mech["monsters_killed_to_clear"] = int(rng.integers(1, 5))
    mech = MechanicsParams(**mech)
    return LevelProgram(
        name=f"{name}{int(rng.integers(1_000_000)):06d}",
        goal=frozenset(goal),
        floor=floor,
        inventory_overrides=inv,
        placements=tuple(placements),
        mechanics=mech,
        completed=frozenset(completed),
    )


def describe_change(parent: LevelProgram | None, child: LevelProgram, intent: str, registry) -> str:
    goal = registry.ordered(child.goal)
    if parent is None:
        prose = f"A fresh level that trains {', '.join(goal)}."
    else:
        old, new = set(parent.goal), set(child.goal)
        moved = set(child.completed) - set(parent.completed)
        prose = {
            "expand": f"Extend {parent.name} with {', '.join(registry.ordered(new - old)) or 'no new goal'} "
            "and strip one piece of scaffolding.",
            "simplify": f"Ease {parent.name}: {', '.join(registry.ordered(moved)) or 'nothing'} is treated as done "
            "and some help is added.",
            "persist": f"Keep the goal of {parent.name} but soften its mechanics.",
            "vary": f"Keep the goal of {parent.name} on a reshuffled layout with tweaked mechanics.",
        }[intent]
    return format_description(intent, goal, prose)


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------


class MutationBackend:
    """Deterministic engine: the description carries the intent and the child
    program; ``write_program`` returns it. Open-loop contexts get
    :func:`random_level` instead of a mutation."""

    name = "mutation"

    def __init__(self, registry: AchievementRegistry | None = None):
        self.registry = registry or default_registry()
        self._pending: dict[str, LevelProgram] = {}

    def describe(self, ctx: GenerationContext, rng: np.random.Generator) -> str:
        if ctx.open_loop:
            child = random_level(rng, self.registry, name="open")
            intent = ctx.intent_override or "vary"
            text = describe_change(None, child, intent, self.registry)
        else:
            intent = choose_intent(ctx)
            child = mutate(ctx.parent_program, intent, rng, self.registry)
            text = describe_change(ctx.parent_program, child, intent, self.registry)
        return text + f"\n<!-- {serialize(child, self.registry).strip()} -->\n"

    def write_program(self, ctx: GenerationContext, description: str, rng: np.random.Generator) -> str:
        m = re.search(r"<!-- (.*) -->", description, re.DOTALL)
        if m is None:
            raise BackendError("description carries no program")
        return m.group(1) + "\n"


def _tagged(text: str, tag: str) -> str | None:
    m = re.search(rf"<{tag}>(.*?)</{tag}>", text, re.DOTALL)
    return m.group(1).strip() if m else None


class RemoteBackend:
    """Chat-completion client for an OpenAI-compatible endpoint.

    Configured from ``GENERATOR_URL``, ``GENERATOR_MODEL`` and
    ``GENERATOR_API_KEY`` unless given explicitly.
    """

    name = "remote"

    def __init__(
        self,
        url: str | None = None,
        model: str | None = None,
        api_key: str | None = None,
        *,
        timeout: float = 120.0,
        temperature: float = 0.6,
        top_p: float = 0.95,
        max_tokens: int = 4096,
        transport: httpx.BaseTransport | None = None,
    ):
        self.url = url or os.environ.get("GENERATOR_URL")
        if not self.url:
            raise BackendError("no generator URL configured (set GENERATOR_URL)")
        self.model = model or os.environ.get("GENERATOR_MODEL", "default")
        self.api_key = api_key if api_key is not None else os.environ.get("GENERATOR_API_KEY")
        self.temperature = temperature
        self.top_p = top_p
        self.max_tokens = max_tokens
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def close(self):
        self._client.close()

    def complete(self, system: str, user: str) -> str:
        body = {
            "model": self.model,
            "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        }
        try:
            resp = self._client.post(self.url, json=body)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except httpx.TimeoutException as exc:
            raise BackendError(f"generator timed out: {exc}") from exc
        except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"bad generator reply: {exc}") from exc

    def describe(self, ctx: GenerationContext, rng) -> str:
        reply = self.complete(ctx.domain_context_1, render_description_prompt(ctx))
        return _tagged(reply, "docstring") or reply

    def write_program(self, ctx: GenerationContext, description: str, rng) -> str:
        reply = self.complete(ctx.domain_context_2, render_program_prompt(ctx, description))
        code = _tagged(reply, "code")
        if code is None:
            raise BackendError("reply has no <code> section")
        return code + "\n"


def render_description_prompt(ctx: GenerationContext) -> str:
    parts = []
    if ctx.parent_program is not None:
        parts.append("Parent level:\n" + serialize(ctx.parent_program))
    if ctx.parent_perf is not None:
        parts.append("Agent on the parent level:\n" + ctx.parent_perf.render())
    if ctx.target_perf is not None:
        parts.append("Agent on the full game:\n" + ctx.target_perf.render())
    parts.append(ctx.mutation_instructions_1)
    return "\n\n".join(parts)


def render_program_prompt(ctx: GenerationContext, description: str) -> str:
    parts = ["Example levels:\n" + "\n".join(serialize(p) for p in ctx.few_shot)] if ctx.few_shot else []
    parts.append("Level description:\n" + description)
    parts.append(ctx.mutation_instructions_2)
    return "\n\n".join(parts)


def make_backend(kind: str, registry=None, **kwargs):
    if kind == "mutation":
        return MutationBackend(registry)
    if kind == "remote":
        return RemoteBackend(**kwargs)
    raise ValueError(f"unknown backend {kind!r}")


# ---------------------------------------------------------------------------
# the two phases and the compile check
# ---------------------------------------------------------------------------


def dream_description(ctx: GenerationContext, backend, rng) -> str:
    text = backend.describe(ctx, rng)
    parse_description(text)
    return text


def dream_program(ctx: GenerationContext, description: str, backend, rng) -> str:
    return backend.write_program(ctx, description, rng)


@dataclass(frozen=True)
class Valid:
    program: LevelProgram


@dataclass(frozen=True)
class Rejected:
    reason: str  # parse, semantic, compile, runtime or backend
    message: str = ""


@dataclass
class CandidateLevel:
    index: int
    description: str = ""
    program_text: str = ""
    verdict: object = "Pending"

    @property
    def valid(self) -> bool:
        return isinstance(self.verdict, Valid)

    @property
    def program(self) -> LevelProgram | None:
        return self.verdict.program if self.valid else None

    @property
    def intent(self) -> str | None:
        try:
            return parse_description(self.description).intent
        except BackendError:
            return None


def compile_check(program_text: str, rollout_steps: int, rng, registry: AchievementRegistry | None = None):
    """Parse, validate, reset and take ``rollout_steps`` random actions.

    Returns :class:`Valid` or :class:`Rejected`; never raises and never repairs.
    """
    registry = registry or default_registry()
    try:
        program = parse(program_text, registry, check=False)
    except ParseError as exc:
        return Rejected("parse", str(exc))
    except SemanticError as exc:
        return Rejected("semantic", str(exc))
    errors = validate(program, registry)
    if errors:
        return Rejected("semantic", "; ".join(str(e) for e in errors))
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    try:
        state, _ = world.reset(program, int(rng.integers(2**31)), registry=registry)
    except CompileError as exc:
        return Rejected("compile", str(exc))
    except Exception as exc:  # noqa: BLE001 - any failure is a verdict
        return Rejected("runtime", f"{type(exc).__name__}: {exc}")
    try:
        for a in rng.integers(world.NUM_ACTIONS, size=rollout_steps):
            state, _, _, done = world.step(state, int(a), registry)
            if done:
                break
    except Exception as exc:  # noqa: BLE001
        return Rejected("runtime", f"{type(exc).__name__}: {exc}")
    return Valid(program)


def _generate_one(index, ctx, backend, seed, rollout_steps, registry) -> CandidateLevel:
    rng = np.random.default_rng(seed)
    cand = CandidateLevel(index)
    try:
        cand.description = dream_description(ctx, backend, rng)
        cand.program_text = dream_program(ctx, cand.description, backend, rng)
    except BackendError as exc:
        cand.verdict = Rejected("backend", str(exc))
        return cand
    cand.verdict = compile_check(cand.program_text, rollout_steps, rng, registry)
    return cand


def generate_batch(
    parent: int | None,
    archive: Archive,
    m_target: int,
    surplus_factor: float,
    backend,
    rng: np.random.Generator,
    *,
    open_loop: bool = False,
    target_perf: PerformanceProfile | None = None,
    few_shot_k: int = 2,
    rollout_steps: int = 32,
    executor: Executor | None = None,
    record: list | None = None,
    intent_override: str | None = None,
) -> list[CandidateLevel]:
    """Generate ``ceil(m_target * surplus_factor)`` candidates and keep the
    first ``m_target`` valid ones in generation order.

    Each candidate gets its own rng split off ``rng``; with an ``executor``
    they run concurrently. ``record`` (if given) receives every candidate.
    """
    if m_target < 1:
        raise ValueError("m_target must be at least 1")
    if surplus_factor < 1:
        raise ValueError("surplus_factor must be at least 1")
    ctx = build_context(
        parent,
        archive,
        few_shot_k=few_shot_k,
        open_loop=open_loop,
        target_perf=target_perf,
        intent_override=intent_override,
    )
    n = math.ceil(m_target * surplus_factor - 1e-9)
    seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(n)
    args = [(i, ctx, backend, seeds[i], rollout_steps, archive.registry) for i in range(n)]
    if executor is None:
        candidates = [_generate_one(*a) for a in args]
    else:
        candidates = list(executor.map(lambda a: _generate_one(*a), args))
    if record is not None:
        record.extend(candidates)
    valid = [c for c in candidates if c.valid]
    if len(valid) < m_target:
        logger.info("generation yielded %d/%d valid levels", len(valid), m_target)
    return valid[:m_target]

