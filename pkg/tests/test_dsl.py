import pytest
from hypothesis import given
from hypothesis import strategies as st

from codecurriculum import world
from codecurriculum.dsl import (
    Annulus,
    Cell,
    CompileError,
    LevelProgram,
    MobSpec,
    ParseError,
    PlacementSpec,
    SemanticError,
    compile_program,
    parse,
    serialize,
    validate,
)
from codecurriculum.registry import BLOCKS, ITEM_MAX, MECHANICS_DEFAULTS, default_registry
from codecurriculum.world import MechanicsParams

from conftest import CORPUS, level

REG = default_registry()


def test_minimal_program_gets_defaults():
    p = parse('level "t" { goal { COLLECT_WOOD } }')
    assert p.floor == 0
    assert p.inventory_overrides == {}
    assert p.goal == frozenset({"COLLECT_WOOD"})
    assert p.completed == frozenset()
    assert p.mechanics == MechanicsParams()
    assert p.mechanics.monsters_killed_to_clear == 4


def test_source_text_kept_verbatim():
    text = '# note\nlevel "t" {   goal { COLLECT_WOOD } }\n'
    assert parse(text).source_text == text


def test_empty_goal_is_semantic_error():
    with pytest.raises(SemanticError, match="goal"):
        parse('level "t" { goal { } }')


def test_parse_error_carries_position():
    with pytest.raises(ParseError) as info:
        parse('level "t" {\n  inventory { wood = 2 }\n  goal { COLLECT_WOOD }\n}')
    assert info.value.line == 2
    assert info.value.col > 1


def test_all_semantic_errors_reported_in_source_order():
    text = level("  floor = 9\n  inventory { pickaxe = 8; }\n  goal { COLLECT_WOOD }\n  completed { COLLECT_WOOD }")
    with pytest.raises(SemanticError) as info:
        parse(text)
    lines = [e.line for e in info.value.errors]
    assert len(lines) == 3
    assert lines == sorted(lines)


def test_validate_goal_completed_overlap_single_error():
    p = parse(level("  goal { COLLECT_WOOD }\n  completed { COLLECT_WOOD }"), check=False)
    errors = validate(p, REG)
    assert len(errors) == 1


def test_seed_collect_fields():
    from codecurriculum.pipeline import seed_paths

    collect = [p for p in seed_paths() if p.stem == "seed_collect"][0]
    p = parse(collect.read_text())
    assert p.inventory_overrides == {"pickaxe": 1}
    assert p.goal == frozenset({"COLLECT_COAL"})
    assert p.completed == frozenset({"MAKE_WOOD_PICKAXE"})
    (coal,) = p.placements
    assert coal.block == "COAL"
    assert coal.region == Annulus(4, 8, 5)


@pytest.mark.parametrize("path", sorted((CORPUS / "valid").glob("*.lvl")), ids=lambda p: p.stem)
def test_valid_corpus_parses_and_compiles(path):
    p = parse(path.read_text())
    for seed in range(5):
        s = compile_program(p, seed)
        assert s.inventory[4] == p.inventory_overrides.get("pickaxe", 0)


@pytest.mark.parametrize("path", sorted((CORPUS / "malformed").glob("*.lvl")), ids=lambda p: p.stem)
def test_malformed_corpus_rejected(path):
    with pytest.raises((ParseError, SemanticError, CompileError)):
        p = parse(path.read_text())
        compile_program(p, 0)


def test_compile_places_exact_cell():
    p = parse(level('  place { block = COAL; at (2, 7) }\n  goal { COLLECT_COAL }'))
    s = compile_program(p, 3)
    assert s.block(0, 2, 7) == world.COAL


def test_compile_annulus_respects_distance_and_count():
    p = parse(level('  place { block = WATER; near { min = 2; max = 3; n = 4 } }\n  goal { COLLECT_WOOD }'))
    base = compile_program(parse(level("  goal { COLLECT_WOOD }")), 11)
    s = compile_program(p, 11)
    changed = [
        (r, c)
        for r in range(12)
        for c in range(12)
        if s.block(0, r, c) != base.block(0, r, c)
    ]
    assert len(changed) <= 4
    assert sum(s.block(0, r, c) == world.WATER for r, c in changed) == len(changed)
    for r, c in changed:
        assert 2 <= abs(r - 5) + abs(c - 5) <= 3


def test_compile_infeasible_annulus_raises():
    p = parse(level("  place { block = TREE; on { WATER } near { min = 1; max = 1; n = 4 } }\n  goal { COLLECT_WOOD }"))
    with pytest.raises(CompileError):
        compile_program(p, 0)


def test_compile_is_deterministic_per_seed():
    p = parse(level("  mob { kind = passive; n = 2; near { min = 3; max = 6; n = 2 } }\n  goal { COLLECT_WOOD }"))
    assert compile_program(p, 5) == compile_program(p, 5)
    assert compile_program(p, 5).maps != compile_program(p, 6).maps


def test_compile_marks_completed_as_initial():
    p = parse(level("  goal { PLACE_TABLE }\n  completed { COLLECT_WOOD }"))
    s = compile_program(p, 0)
    assert s.initial_achievements == REG.mask({"COLLECT_WOOD"})
    assert s.achievements == s.initial_achievements


# ---------------------------------------------------------------------------
# round trip
# ---------------------------------------------------------------------------

ach = st.sampled_from(REG.ids)
annulus = st.builds(
    lambda lo, extra, n: Annulus(lo, lo + extra, n),
    st.integers(1, 6),
    st.integers(0, 5),
    st.integers(1, 3),
)
region = st.one_of(annulus, st.builds(Cell, st.integers(0, 11), st.integers(0, 11)))
placement = st.builds(
    PlacementSpec,
    block=st.sampled_from(BLOCKS),
    region=region,
    on_blocks=st.frozensets(st.sampled_from(BLOCKS), min_size=1, max_size=3),
)


@st.composite
def mob_spec(draw):
    n = draw(st.integers(1, 3))
    if draw(st.booleans()):
        return MobSpec(draw(st.sampled_from(["passive", "melee"])), 1, Cell(draw(st.integers(0, 11)), draw(st.integers(0, 11))))
    lo = draw(st.integers(1, 5))
    return MobSpec(draw(st.sampled_from(["passive", "melee"])), n, Annulus(lo, lo + draw(st.integers(0, 4)), n))


@st.composite
def program(draw):
    goal = draw(st.frozensets(ach, min_size=1, max_size=4))
    completed = draw(st.frozensets(ach, max_size=4)) - goal
    inv = draw(st.dictionaries(st.sampled_from(sorted(ITEM_MAX)), st.integers(0, 3), max_size=3))
    mech = {
        k: (draw(st.integers(0, 6)) if k == "monsters_killed_to_clear" else draw(st.sampled_from([0.0, 0.25, 0.5, 1.0, 1.5, 2.0])))
        for k in MECHANICS_DEFAULTS
        if draw(st.booleans())
    }
    return LevelProgram(
        name=draw(st.text(st.characters(min_codepoint=32, max_codepoint=126), min_size=1, max_size=12)),
        goal=goal,
        floor=draw(st.integers(0, 1)),
        inventory_overrides=inv,
        placements=tuple(draw(st.lists(placement, max_size=3))),
        mob_placements=tuple(draw(st.lists(mob_spec(), max_size=2))),
        mechanics=MechanicsParams(**mech),
        completed=completed,
    )


def _fields(p):
    strip = lambda specs: [(s.block, s.region, s.on_blocks) if isinstance(s, PlacementSpec) else (s.kind, s.count, s.region) for s in specs]
    return (
        p.name,
        p.goal,
        p.completed,
        p.floor,
        p.inventory_overrides,
        strip(p.placements),
        strip(p.mob_placements),
        p.mechanics,
    )


@given(program())
def test_serialize_parse_round_trip(p):
    text = serialize(p, REG)
    q = parse(text, REG)
    assert _fields(q) == _fields(p)
    assert serialize(q, REG) == text


@given(program(), st.integers(0, 2**31 - 1))
def test_compile_either_succeeds_or_raises_compile_error(p, seed):
    try:
        s = compile_program(p, seed)
    except CompileError:
        return
    assert 0 <= s.row < 12 and 0 <= s.col < 12
    assert s.block(s.floor, s.row, s.col) in world.WALKABLE
    assert len({(m[1], m[2], m[3]) for m in s.mobs}) == len(s.mobs)


def test_compile_never_buries_start():
    p = parse(level("  place { block = STONE; at (5, 5) }\n  goal { COLLECT_WOOD }"))
    with pytest.raises(CompileError):
        compile_program(p, 0)
    s = compile_program(parse(level("  place { block = LADDER; at (5, 5) }\n  goal { COLLECT_WOOD }")), 0)
    assert s.block(0, 5, 5) == world.LADDER

