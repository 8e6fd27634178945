"""Level description language.

A level file looks like::

    level "seed_collect" {
      floor = 0
      inventory { pickaxe = 1; }
      place { block = COAL; on { GRASS, STONE } near { min = 4; max = 8; n = 5 } }
      mob { kind = passive; n = 3; near { min = 4; max = 8; n = 3 } }
      mechanics { melee_spawn_multiplier = 0.2; }
      goal { COLLECT_COAL }
      completed { MAKE_WOOD_PICKAXE }
    }

``parse`` turns text into a :class:`LevelProgram`, ``serialize`` emits the
canonical text back, and ``compile_program`` builds the initial
:class:`~codecurriculum.world.WorldState` for one episode.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import world
from .registry import (
    BLOCK_INDEX,
    BLOCKS,
    ITEM_INDEX,
    ITEM_MAX,
    ITEMS,
    MAP_COLS,
    MAP_ROWS,
    MECHANICS_DEFAULTS,
    MECHANICS_FIELDS,
    MOB_CAP,
    MOB_KINDS,
    NUM_FLOORS,
    AchievementRegistry,
    default_registry,
)
from .world import MechanicsParams


class DSLError(ValueError):
    def __init__(self, line: int | None, col: int | None, message: str):
        self.line = line
        self.col = col
        self.message = message
        where = f"{line}:{col}: " if line is not None else ""
        super().__init__(f"{where}{message}")

    @property
    def sort_key(self):
        inf = float("inf")
        return (inf if self.line is None else self.line, inf if self.col is None else self.col)


class ParseError(DSLError):
    pass


class SemanticError(DSLError):
    def __init__(self, line, col, message, errors=None):
        super().__init__(line, col, message)
        self.errors = errors if errors is not None else [self]


class CompileError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# program model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    row: int
    col: int


@dataclass(frozen=True)
class Annulus:
    min_dist: int
    max_dist: int
    n: int


DEFAULT_SUBSTRATE = frozenset({"GRASS"})


@dataclass(frozen=True)
class PlacementSpec:
    block: str
    region: Cell | Annulus
    on_blocks: frozenset = DEFAULT_SUBSTRATE
    pos: tuple | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class MobSpec:
    kind: str
    count: int
    region: Cell | Annulus
    pos: tuple | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class LevelProgram:
    name: str
    goal: frozenset
    floor: int = 0
    inventory_overrides: dict = field(default_factory=dict)
    placements: tuple = ()
    mob_placements: tuple = ()
    mechanics: MechanicsParams = MechanicsParams()
    completed: frozenset = frozenset()
    source_text: str | None = field(default=None, compare=False, repr=False)
    # source positions of statements, keyed like ("goal",) or ("inventory", "wood")
    positions: dict = field(default_factory=dict, compare=False, repr=False)

    def with_changes(self, **changes) -> "LevelProgram":
        """Copy with edits; source text and positions no longer apply."""
        return replace(self, source_text=None, positions={}, **changes)


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<number>-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[{}()=;,])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # string | number | ident | punct | eof
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(line, pos - line_start + 1, f"unexpected character {text[pos]!r}")
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            tokens.append(Token(kind, m.group(), line, pos - line_start + 1))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.i = 0
        self.errors: list[SemanticError] = []

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def fail(self, message: str, tok: Token | None = None):
        tok = tok or self.tok
        raise ParseError(tok.line, tok.col, message)

    def advance(self) -> Token:
        tok = self.tok
        self.i += 1
        return tok

    def expect(self, text: str) -> Token:
        if self.tok.text != text or self.tok.kind in ("string", "eof"):
            found = "end of input" if self.tok.kind == "eof" else repr(self.tok.text)
            self.fail(f"expected {text!r}, found {found}")
        return self.advance()

    def accept(self, text: str) -> bool:
        if self.tok.text == text and self.tok.kind in ("punct", "ident"):
            self.i += 1
            return True
        return False

    def ident(self) -> Token:
        if self.tok.kind != "ident":
            self.fail(f"expected identifier, found {self.tok.text or 'end of input'!r}")
        return self.advance()

    def integer(self) -> tuple[int, Token]:
        tok = self.tok
        if tok.kind != "number" or not re.fullmatch(r"-?\d+", tok.text):
            self.fail(f"expected integer, found {tok.text or 'end of input'!r}")
        self.advance()
        return int(tok.text), tok

    def number(self) -> tuple[float, Token]:
        tok = self.tok
        if tok.kind != "number":
            self.fail(f"expected number, found {tok.text or 'end of input'!r}")
        self.advance()
        return (int(tok.text) if re.fullmatch(r"-?\d+", tok.text) else float(tok.text)), tok

    def semantic(self, tok: Token, message: str):
        self.errors.append(SemanticError(tok.line, tok.col, message))

    # program = "level" STRING "{" stmt* "}"
    def program(self) -> dict:
        self.expect("level")
        if self.tok.kind != "string":
            self.fail("expected level name string")
        name = _unquote(self.advance().text)
        self.expect("{")
        fields: dict = {
            "name": name,
            "inventory_overrides": {},
            "placements": [],
            "mob_placements": [],
            "mechanics": {},
            "positions": {},
        }
        seen: dict[str, Token] = {}
        while not self.accept("}"):
            tok = self.tok
            if tok.kind == "eof":
                self.fail("expected '}' to close level")
            if tok.kind != "ident":
                self.fail(f"expected statement, found {tok.text!r}")
            handler = getattr(self, f"stmt_{tok.text}", None)
            if handler is None:
                self.fail(f"unknown statement {tok.text!r}")
            if tok.text in ("floor", "goal", "completed") and tok.text in seen:
                self.semantic(tok, f"duplicate {tok.text} statement")
            seen.setdefault(tok.text, tok)
            self.advance()
            handler(fields, tok)
        if self.tok.kind != "eof":
            self.fail(f"unexpected {self.tok.text!r} after level")
        return fields

    def stmt_floor(self, fields, tok):
        self.expect("=")
        value, _ = self.integer()
        fields["floor"] = value
        fields["positions"][("floor",)] = (tok.line, tok.col)

    def stmt_inventory(self, fields, tok):
        self.expect("{")
        while not self.accept("}"):
            key = self.ident()
            self.expect("=")
            value, _ = self.integer()
            self.expect(";")
            if key.text in fields["inventory_overrides"]:
                self.semantic(key, f"duplicate inventory item {key.text!r}")
            fields["inventory_overrides"][key.text] = value
            fields["positions"][("inventory", key.text)] = (key.line, key.col)

    def stmt_place(self, fields, tok):
        self.expect("{")
        self.expect("block")
        self.expect("=")
        block = self.ident().text
        self.expect(";")
        on = DEFAULT_SUBSTRATE
        if self.accept("on"):
            on = frozenset(self.ident_list())
        region = self.region()
        self.expect("}")
        fields["placements"].append(PlacementSpec(block, region, on, pos=(tok.line, tok.col)))

    def stmt_mob(self, fields, tok):
        self.expect("{")
        self.expect("kind")
        self.expect("=")
        kind = self.ident().text
        self.expect(";")
        self.expect("n")
        self.expect("=")
        count, _ = self.integer()
        self.expect(";")
        region = self.region()
        self.expect("}")
        fields["mob_placements"].append(MobSpec(kind, count, region, pos=(tok.line, tok.col)))

    def region(self):
        if self.accept("at"):
            self.expect("(")
            row, _ = self.integer()
            self.expect(",")
            col, _ = self.integer()
            self.expect(")")
            return Cell(row, col)
        if self.accept("near"):
            self.expect("{")
            values = {}
            for key in ("min", "max", "n"):
                self.expect(key)
                self.expect("=")
                values[key], _ = self.integer()
                if key != "n":
                    self.expect(";")
            self.accept(";")
            self.expect("}")
            return Annulus(values["min"], values["max"], values["n"])
        self.fail(f"expected region ('at' or 'near'), found {self.tok.text or 'end of input'!r}")

    def stmt_mechanics(self, fields, tok):
        self.expect("{")
        while not self.accept("}"):
            key = self.ident()
            self.expect("=")
            value, vtok = self.number()
            self.expect(";")
            if key.text not in MECHANICS_DEFAULTS:
                self.semantic(key, f"unknown mechanics parameter {key.text!r}")
                continue
            if key.text in fields["mechanics"]:
                self.semantic(key, f"duplicate mechanics parameter {key.text!r}")
            if key.text == "monsters_killed_to_clear" and not isinstance(value, int):
                self.semantic(vtok, "monsters_killed_to_clear must be an integer")
                value = int(value)
            fields["mechanics"][key.text] = value
            fields["positions"][("mechanics", key.text)] = (key.line, key.col)

    def stmt_goal(self, fields, tok):
        fields["goal"] = frozenset(self.ident_list(allow_empty=True))
        fields["positions"][("goal",)] = (tok.line, tok.col)

    def stmt_completed(self, fields, tok):
        fields["completed"] = frozenset(self.ident_list(allow_empty=True))
        fields["positions"][("completed",)] = (tok.line, tok.col)

    def ident_list(self, allow_empty: bool = False) -> list[str]:
        self.expect("{")
        if allow_empty and self.accept("}"):
            return []
        names = [self.ident().text]
        while self.accept(","):
            names.append(self.ident().text)
        self.expect("}")
        return names


def _unquote(s: str) -> str:
    return re.sub(r"\\(.)", r"\1", s[1:-1])


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def parse(
    text: str,
    registry: AchievementRegistry | None = None,
    *,
    check: bool = True,
) -> LevelProgram:
    """Parse DSL source into a program with defaults filled in.

    Raises :class:`ParseError` on grammar violations. With ``check`` (the
    default) the program is also validated and the first
    :class:`SemanticError` is raised, carrying all errors in ``.errors``.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    p = _Parser(text)
    fields = p.program()
    if "goal" not in fields:
        p.errors.append(SemanticError(None, None, "missing goal statement"))
    mech = {**MECHANICS_DEFAULTS, **fields.pop("mechanics")}
    program = LevelProgram(
        name=fields["name"],
        goal=fields.get("goal", frozenset()),
        floor=fields.get("floor", 0),
        inventory_overrides=fields["inventory_overrides"],
        placements=tuple(fields["placements"]),
        mob_placements=tuple(fields["mob_placements"]),
        mechanics=MechanicsParams(**mech),
        completed=fields.get("completed", frozenset()),
        source_text=text,
        positions=fields["positions"],
    )
    if check:
        errors = sorted(p.errors + validate(program, registry), key=lambda e: e.sort_key)
        if errors:
            first = errors[0]
            raise SemanticError(first.line, first.col, first.message, errors)
    return program


def parse_file(path, registry: AchievementRegistry | None = None) -> LevelProgram:
    return parse(Path(path).read_text(encoding="utf-8"), registry)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate(
    p: LevelProgram,
    registry: AchievementRegistry | None = None,
    map_dims: tuple[int, int] = (MAP_ROWS, MAP_COLS),
) -> list[SemanticError]:
    """All invariant violations of ``p``, ordered by source position."""
    registry = registry or default_registry()
    rows, cols = map_dims
    errors: list[SemanticError] = []
    pos = p.positions

    def err(where, message):
        line, col = where if where else (None, None)
        errors.append(SemanticError(line, col, message))

    if not p.name:
        err(None, "level name must not be empty")
    if not 0 <= p.floor < NUM_FLOORS:
        err(pos.get(("floor",)), f"floor {p.floor} outside [0, {NUM_FLOORS})")

    for item, count in p.inventory_overrides.items():
        where = pos.get(("inventory", item))
        if item not in ITEM_INDEX:
            err(where, f"unknown inventory item {item!r}")
        elif not 0 <= count <= ITEM_MAX[item]:
            err(where, f"inventory {item}={count} outside [0, {ITEM_MAX[item]}]")

    def check_region(region, where, what):
        if isinstance(region, Cell):
            if not (0 <= region.row < rows and 0 <= region.col < cols):
                err(where, f"{what} cell ({region.row}, {region.col}) outside the map")
        else:
            if region.min_dist < 1:
                err(where, f"{what} min distance must be >= 1")
            if region.max_dist < region.min_dist:
                err(where, f"{what} max distance below min distance")
            if region.n < 1:
                err(where, f"{what} count must be >= 1")

    for spec in p.placements:
        if spec.block not in BLOCK_INDEX:
            err(spec.pos, f"unknown block {spec.block!r}")
        for b in sorted(spec.on_blocks):
            if b not in BLOCK_INDEX:
                err(spec.pos, f"unknown substrate block {b!r}")
        check_region(spec.region, spec.pos, "placement")

    for spec in p.mob_placements:
        if spec.kind not in MOB_KINDS:
            err(spec.pos, f"unknown mob kind {spec.kind!r}")
        if spec.count < 1:
            err(spec.pos, "mob count must be >= 1")
        elif spec.count > MOB_CAP:
            err(spec.pos, f"mob count {spec.count} exceeds cap {MOB_CAP}")
        if isinstance(spec.region, Cell):
            if spec.count != 1:
                err(spec.pos, "a mob placed at an exact cell must have n = 1")
        elif spec.region.n != spec.count:
            err(spec.pos, "mob count and region n disagree")
        check_region(spec.region, spec.pos, "mob")

    m = p.mechanics
    for name in MECHANICS_FIELDS:
        value = getattr(m, name)
        where = pos.get(("mechanics", name))
        if name == "monsters_killed_to_clear":
            if int(value) != value or value < 0:
                err(where, "monsters_killed_to_clear must be an integer >= 0")
        elif not value >= 0:
            err(where, f"{name} must be >= 0")

    goal_pos = pos.get(("goal",))
    done_pos = pos.get(("completed",))
    if not p.goal:
        err(goal_pos, "goal must not be empty")
    for a in registry.ordered(p.goal):
        if a not in registry:
            err(goal_pos, f"unknown achievement {a!r} in goal")
    for a in registry.ordered(p.completed):
        if a not in registry:
            err(done_pos, f"unknown achievement {a!r} in completed")
    overlap = registry.ordered(p.goal & p.completed)
    if overlap:
        err(done_pos or goal_pos, f"achievements both in goal and completed: {', '.join(overlap)}")

    errors.sort(key=lambda e: e.sort_key)
    return errors


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _fmt_number(x) -> str:
    if isinstance(x, int):
        return str(x)
    if float(x).is_integer():
        return f"{x:.1f}"
    return repr(float(x))


def _fmt_region(region) -> str:
    if isinstance(region, Cell):
        return f"at ({region.row}, {region.col})"
    return f"near {{ min = {region.min_dist}; max = {region.max_dist}; n = {region.n} }}"


def serialize(p: LevelProgram, registry: AchievementRegistry | None = None) -> str:
    """Canonical text for ``p``; defaults are omitted."""
    registry = registry or default_registry()
    lines = [f"level {_quote(p.name)} {{"]
    if p.floor != 0:
        lines.append(f"  floor = {p.floor}")
    if p.inventory_overrides:
        items = sorted(p.inventory_overrides, key=lambda k: (ITEM_INDEX.get(k, len(ITEMS)), k))
        body = " ".join(f"{k} = {p.inventory_overrides[k]};" for k in items)
        lines.append(f"  inventory {{ {body} }}")
    for spec in p.placements:
        on = ""
        if spec.on_blocks != DEFAULT_SUBSTRATE:
            names = sorted(spec.on_blocks, key=lambda b: (BLOCK_INDEX.get(b, len(BLOCKS)), b))
            on = f"on {{ {', '.join(names)} }} "
        lines.append(f"  place {{ block = {spec.block}; {on}{_fmt_region(spec.region)} }}")
    for spec in p.mob_placements:
        lines.append(f"  mob {{ kind = {spec.kind}; n = {spec.count}; {_fmt_region(spec.region)} }}")
    changed = [
        f"{name} = {_fmt_number(getattr(p.mechanics, name))};"
        for name in MECHANICS_FIELDS
        if getattr(p.mechanics, name) != MECHANICS_DEFAULTS[name]
    ]
    if changed:
        lines.append(f"  mechanics {{ {' '.join(changed)} }}")
    lines.append(f"  goal {{ {', '.join(registry.ordered(p.goal))} }}")
    if p.completed:
        lines.append(f"  completed {{ {', '.join(registry.ordered(p.completed))} }}")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# compilation
# ---------------------------------------------------------------------------


def compile_program(
    p: LevelProgram,
    rng_seed: int,
    *,
    max_timesteps: int = world.DEFAULT_MAX_TIMESTEPS,
    registry: AchievementRegistry | None = None,
) -> world.WorldState:
    """Build the initial state of one episode of ``p``.

    Deterministic in ``(p, rng_seed)``. Annulus placements enumerate the
    feasible cells, shuffle them with the seeded generator and take the first
    ``n``; too few feasible cells raises :class:`CompileError`.
    """
    registry = registry or default_registry()
    rng = np.random.default_rng(rng_seed)
    maps, mobs = world.base_layout(rng)
    floor = p.floor
    sr, sc = world.START[floor]

    for spec in p.placements:
        target = BLOCK_INDEX[spec.block]
        if isinstance(spec.region, Cell):
            r, c = spec.region.row, spec.region.col
            if (r, c) == (sr, sc) and target not in world.WALKABLE:
                raise CompileError(f"placement of {spec.block} would bury the player start")
            maps[world.cell_index(floor, r, c)] = target
            continue
        allowed = {BLOCK_INDEX[b] for b in spec.on_blocks}
        cells = _annulus_cells(maps, floor, (sr, sc), spec.region, allowed)
        cells = [rc for rc in cells if rc != (sr, sc)]
        if len(cells) < spec.region.n:
            raise CompileError(
                f"placement of {spec.region.n} {spec.block} at distance "
                f"{spec.region.min_dist}-{spec.region.max_dist}: only {len(cells)} feasible cells"
            )
        for k in rng.permutation(len(cells))[: spec.region.n]:
            r, c = cells[k]
            maps[world.cell_index(floor, r, c)] = target

    # base mobs buried by block edits are dropped
    mobs = [m for m in mobs if maps[world.cell_index(m[1], m[2], m[3])] in world.WALKABLE]
    occupied = {(m[1], m[2], m[3]) for m in mobs}
    occupied.add((floor, sr, sc))
    for spec in p.mob_placements:
        kind = world.COW if spec.kind == "passive" else world.MELEE_KIND[floor]
        if isinstance(spec.region, Cell):
            cells = [(spec.region.row, spec.region.col)]
            ok = maps[world.cell_index(floor, *cells[0])] in world.WALKABLE and (floor, *cells[0]) not in occupied
            if not ok:
                raise CompileError(f"mob cell {cells[0]} is not free walkable ground")
            chosen = cells
        else:
            cells = _annulus_cells(maps, floor, (sr, sc), spec.region, world.WALKABLE)
            cells = [rc for rc in cells if (floor, *rc) not in occupied]
            if len(cells) < spec.count:
                raise CompileError(
                    f"{spec.count} {spec.kind} mobs at distance "
                    f"{spec.region.min_dist}-{spec.region.max_dist}: only {len(cells)} free cells"
                )
            chosen = [cells[k] for k in rng.permutation(len(cells))[: spec.count]]
        for r, c in chosen:
            mobs.append((kind, floor, r, c, world.MOB_HP[kind], 0))
            occupied.add((floor, r, c))

    inventory = [0] * len(ITEMS)
    for item, count in p.inventory_overrides.items():
        inventory[ITEM_INDEX[item]] = count
    initial = registry.mask(p.completed)
    dynamics_seed = int(rng.integers(0, 2**63))
    return world.WorldState(
        maps=bytes(maps),
        floor=floor,
        row=sr,
        col=sc,
        facing=world.DOWN - world.LEFT,
        inventory=tuple(inventory),
        health=world.MAX_HEALTH,
        food=world.MAX_FOOD,
        mobs=tuple(mobs),
        achievements=initial,
        initial_achievements=initial,
        mechanics=p.mechanics,
        monsters_killed=(0,) * NUM_FLOORS,
        timestep=0,
        rng_state=dynamics_seed,
        max_timesteps=max_timesteps,
    )


def _annulus_cells(maps, floor, origin, region: Annulus, allowed) -> list[tuple[int, int]]:
    r0, c0 = origin
    return [
        (r, c)
        for r in range(MAP_ROWS)
        for c in range(MAP_COLS)
        if region.min_dist <= abs(r - r0) + abs(c - c0) <= region.max_dist
        and maps[world.cell_index(floor, r, c)] in allowed
    ]
