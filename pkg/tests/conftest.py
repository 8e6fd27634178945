from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from codecurriculum.config import default_config
from codecurriculum.registry import default_registry

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

DATA = Path(__file__).parent / "data"
CORPUS = DATA / "corpus"
REPO = Path(__file__).parent.parent


@pytest.fixture
def registry():
    return default_registry()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    """Small enough for a pipeline run to finish in well under a second."""
    return default_config(
        budget_steps=4_000,
        updates_per_cycle=10,
        num_unique_new=2,
        num_unique_replay=2,
        num_unique_replay_no_new=3,
        eval_instances=4,
        eval_interval=2,
        level_max_timesteps=40,
        target_max_timesteps=60,
        rollout_steps=8,
        dr_pool_size=4,
    )


def level(body: str, name: str = "t") -> str:
    return f'level "{name}" {{\n{body}\n}}\n'


PLAIN = 'level "n{}" {{ goal {{ COLLECT_WOOD }} }}'

# (successes, episodes) chosen to land in each status band with window 20, min 8
STATUS_RECIPES = {"A": (7, 8), "B": (5, 8), "C": (3, 8), "D": (1, 8), "Unknown": (3, 5)}


def node_program(i: int):
    from codecurriculum.dsl import parse

    return parse(PLAIN.format(i))


def feed(archive, node_id: int, successes: int, episodes: int) -> None:
    for k in range(episodes):
        archive.record_episode(node_id, k < successes)


def random_lineage(rng, n_max: int = 50):
    """Random forest with random statuses; returns (archive, {id: status letter})."""
    from codecurriculum.archive import Archive

    archive = Archive()
    n = int(rng.integers(1, n_max + 1))
    statuses = {}
    for i in range(n):
        parent = None if i == 0 or rng.random() < 0.15 else int(rng.integers(i))
        archive.insert(node_program(i), parent)
        letter = list(STATUS_RECIPES)[rng.integers(len(STATUS_RECIPES))]
        feed(archive, i, *STATUS_RECIPES[letter])
        statuses[i] = letter
    return archive, statuses


def eligible_by_definition(parents: dict, statuses: dict) -> set:
    """A node qualifies when it is in band A or B and every child is in band D."""
    children = {i: [] for i in parents}
    for child, parent in parents.items():
        if parent is not None:
            children[parent].append(child)
    return {
        i
        for i in parents
        if statuses[i] in ("A", "B") and all(statuses[c] == "D" for c in children[i])
    }


class StubBackend:
    """Echoes the parent program, swapping in unparseable text with probability ``garbage``."""

    name = "stub"

    def __init__(self, garbage: float = 0.0):
        self.garbage = garbage
        self.describe_calls = 0

    def describe(self, ctx, rng):
        from codecurriculum.generator import format_description

        self.describe_calls += 1
        goal = sorted(ctx.parent_program.goal) if ctx.parent_program else ["COLLECT_WOOD"]
        return format_description("persist", goal, "same level again")

    def write_program(self, ctx, description, rng):
        from codecurriculum.dsl import serialize

        if rng.random() < self.garbage:
            return "level {{ this is not a level"
        if ctx.parent_program is None:
            return PLAIN.format("echo")
        return serialize(ctx.parent_program)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
