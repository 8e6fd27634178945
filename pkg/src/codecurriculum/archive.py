"""Level archive: a lineage graph of programs with recency-windowed outcomes.

Provides the status mapping used for parent eligibility, learnability-weighted
parent selection, and prioritized replay sampling (score rank mixed with
staleness).
"""

from __future__ import annotations

import copy
import json
import logging
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from itertools import accumulate

import numpy as np

from .dsl import LevelProgram, parse, serialize
from .registry import AchievementRegistry, default_registry

logger = logging.getLogger(__name__)


class Status(str, Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"
    UNKNOWN = "Unknown"


def learnability(p: float) -> float:
    """p(1 - p); peaks at 0.25 for p = 0.5."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"success rate {p} outside [0, 1]")
    return p * (1.0 - p)


def status_from_rate(sr: float | None, thresholds=(0.75, 0.50, 0.25)) -> Status:
    if sr is None:
        return Status.UNKNOWN
    a, b, c = thresholds
    if sr >= a:
        return Status.A
    if sr >= b:
        return Status.B
    if sr >= c:
        return Status.C
    return Status.D


def rank_weights(scores, ids=None) -> np.ndarray:
    """1 / rank with rank 1 = highest score; equal scores rank by ascending id."""
    scores = np.asarray(scores, dtype=float)
    ids = np.arange(len(scores)) if ids is None else np.asarray(ids)
    order = np.lexsort((ids, -scores))
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    return 1.0 / ranks


def _mixture(scores, last_sampled, counter, tau, beta, ids=None) -> list[float]:
    # Plain floats: archives are small, and numpy's per-call overhead
    # dominates at this size.
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if beta <= 0:
        raise ValueError("beta must be positive")
    n = len(scores)
    if n == 0:
        raise ValueError("no levels to sample from")
    ids = range(n) if ids is None else ids
    order = sorted(range(n), key=lambda j: (-scores[j], ids[j]))
    h = [0.0] * n
    for rank, j in enumerate(order, 1):
        h[j] = rank ** (-1.0 / beta)
    h_total = sum(h)
    stale = [counter - c for c in last_sampled]
    if min(stale) < 0:
        raise ValueError("last-sampled counters exceed the global counter")
    s_total = sum(stale)
    if s_total > 0:
        return [(1.0 - tau) * h[j] / h_total + tau * stale[j] / s_total for j in range(n)]
    return [(1.0 - tau) * h[j] / h_total + tau / n for j in range(n)]


def replay_probabilities(scores, last_sampled, counter, tau, beta, ids=None) -> np.ndarray:
    """Mixture of rank prioritization and staleness over stored levels.

    ``(1 - tau) * h_i^(1/beta) / sum_j h_j^(1/beta) + tau * (c - C_i) / sum_j (c - C_j)``
    with ``h_i = 1 / rank(S_i)``. When every level was just sampled the
    staleness term is uniform.
    """
    scores = [float(x) for x in scores]
    last_sampled = [float(x) for x in last_sampled]
    return np.array(_mixture(scores, last_sampled, counter, tau, beta, ids))


@dataclass
class ArchiveNode:
    id: int
    program: LevelProgram
    parent: int | None = None
    children: set = field(default_factory=set)
    outcomes: deque = field(default_factory=deque)  # (success, unlocked achievements)
    episodes_seen: int = 0
    last_replayed_at: int = 0
    description: str = ""
    created_cycle: int = 0
    retired: bool = False  # failed to compile on some base map; kept for lineage only
    wins: int = 0  # successes currently inside ``outcomes``

    @property
    def is_seed(self) -> bool:
        return self.parent is None


class Archive:
    """Single-writer lineage graph; take :meth:`snapshot` for readers."""

    def __init__(
        self,
        window: int = 20,
        min_episodes: int = 8,
        thresholds=(0.75, 0.50, 0.25),
        tau: float = 0.3,
        beta: float = 1.0,
        registry: AchievementRegistry | None = None,
    ):
        if not thresholds[0] > thresholds[1] > thresholds[2]:
            raise ValueError("status thresholds must be strictly decreasing")
        self.window = window
        self.min_episodes = min_episodes
        self.thresholds = tuple(thresholds)
        self.tau = tau
        self.beta = beta
        self.registry = registry or default_registry()
        self.nodes: dict[int, ArchiveNode] = {}
        self.counter = 0
        self._next_id = 0

    @classmethod
    def from_config(cls, config, registry=None) -> "Archive":
        return cls(
            window=config.N,
            min_episodes=config.min_episodes,
            thresholds=config.status_thresholds,
            tau=config.tau,
            beta=config.beta,
            registry=registry,
        )

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, node_id):
        return node_id in self.nodes

    def __getitem__(self, node_id) -> ArchiveNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise KeyError(f"unknown archive node {node_id}") from None

    @property
    def ids(self) -> list[int]:
        return sorted(self.nodes)

    # -- mutation -----------------------------------------------------------

    def insert(
        self,
        program: LevelProgram,
        parent: int | None = None,
        description: str = "",
        *,
        node_id: int | None = None,
        cycle: int = 0,
    ) -> int:
        if node_id is None:
            node_id = self._next_id
        elif node_id in self.nodes:
            raise ValueError(f"node {node_id} already exists")
        if parent is not None and parent not in self.nodes:
            raise KeyError(f"unknown parent node {parent}")
        self.nodes[node_id] = ArchiveNode(
            id=node_id,
            program=program,
            outcomes=deque(maxlen=self.window),
            last_replayed_at=self.counter,
            description=description,
            created_cycle=cycle,
        )
        self._next_id = max(self._next_id, node_id + 1)
        if parent is not None:
            self.link(parent, node_id)
        return node_id

    def link(self, parent: int, child: int) -> None:
        """Attach ``child`` under ``parent``; rejects second parents and cycles."""
        p, c = self[parent], self[child]
        if c.parent is not None and c.parent != parent:
            raise ValueError(f"node {child} already has parent {c.parent}")
        walk = parent
        while walk is not None:
            if walk == child:
                raise ValueError(f"linking {parent} -> {child} would create a cycle")
            walk = self.nodes[walk].parent
        c.parent = parent
        p.children.add(child)

    def record_episode(self, node_id: int, success: bool, unlocked=frozenset()) -> None:
        node = self[node_id]
        if len(node.outcomes) == node.outcomes.maxlen:
            node.wins -= node.outcomes[0][0]
        node.outcomes.append((bool(success), frozenset(unlocked)))
        node.wins += bool(success)
        node.episodes_seen += 1

    # -- statistics ---------------------------------------------------------

    def success_rate(self, node_id: int) -> float | None:
        node = self[node_id]
        if node.episodes_seen < self.min_episodes or not node.outcomes:
            return None
        return node.wins / len(node.outcomes)

    def achievement_rates(self, node_id: int) -> dict[str, float]:
        """Per-achievement unlock rate over the recency window (empty when unplayed)."""
        node = self[node_id]
        if not node.outcomes:
            return {}
        counts: dict[str, int] = {}
        for _, unlocked in node.outcomes:
            for a in unlocked:
                counts[a] = counts.get(a, 0) + 1
        n = len(node.outcomes)
        return {a: counts[a] / n for a in self.registry.ordered(counts)}

    def status(self, node_id: int) -> Status:
        return status_from_rate(self.success_rate(node_id), self.thresholds)

    def score(self, node_id: int) -> float:
        # Nodes without enough episodes get the maximal score so they are
        # replayed until their status is known.
        sr = self.success_rate(node_id)
        return 0.25 if sr is None else learnability(sr)

    def retire(self, node_id: int) -> None:
        """Withdraw a level from replay and parent selection."""
        self.nodes[node_id].retired = True

    @property
    def active_ids(self) -> list[int]:
        return [i for i in self.ids if not self.nodes[i].retired]

    def eligible_parents(self) -> set[int]:
        statuses = {i: self.status(i) for i in self.nodes}
        return {
            i
            for i, node in self.nodes.items()
            if statuses[i] in (Status.A, Status.B)
            and not node.retired
            and all(statuses[c] is Status.D for c in node.children)
        }

    def parent_probabilities(self) -> dict[int, float]:
        eligible = sorted(self.eligible_parents())
        if not eligible:
            return {}
        f = np.array([learnability(self.success_rate(i)) for i in eligible])
        if f.sum() == 0:
            # every candidate is fully mastered; fall back to uniform
            f = np.ones(len(eligible))
        return dict(zip(eligible, f / f.sum()))

    def sample_parent(self, rng: np.random.Generator) -> int | None:
        """Draw a parent proportional to learnability, or None if nothing is eligible."""
        probs = self.parent_probabilities()
        if not probs:
            return None
        ids = list(probs)
        return ids[rng.choice(len(ids), p=list(probs.values()))]

    # -- replay -------------------------------------------------------------

    def _replay_mixture(self, exclude=()) -> tuple[list[int], list[float]]:
        skip = set(exclude)
        ids = [i for i in self.ids if i not in skip and not self.nodes[i].retired]
        if not ids:
            raise ValueError("archive has no replayable levels")
        probs = _mixture(
            [self.score(i) for i in ids],
            [self.nodes[i].last_replayed_at for i in ids],
            self.counter,
            self.tau,
            self.beta,
            ids,
        )
        return ids, probs

    def replay_distribution(self, exclude=()) -> tuple[list[int], np.ndarray]:
        ids, probs = self._replay_mixture(exclude)
        return ids, np.array(probs)

    def sample_replay(self, k: int, rng: np.random.Generator, exclude=(), update: bool = True) -> list[int]:
        """Draw up to ``k`` distinct levels by iterated renormalization.

        With ``update`` every drawn level has its last-sampled counter set to
        the global counter, which then advances once per draw.
        """
        ids, weights = self._replay_mixture(exclude)
        k = min(k, len(ids))
        available = [True] * len(ids)
        drawn = []
        for _ in range(k):
            if sum(weights) <= 0:
                weights = [float(a) for a in available]
            cdf = list(accumulate(weights))
            j = min(bisect_right(cdf, rng.random() * cdf[-1]), len(ids) - 1)
            drawn.append(ids[j])
            weights[j] = 0.0
            available[j] = False
        if update:
            for node_id in drawn:
                self.nodes[node_id].last_replayed_at = self.counter
                self.counter += 1
        return drawn

    # -- views & export -----------------------------------------------------

    def snapshot(self) -> "Archive":
        return copy.deepcopy(self)

    def seeds(self) -> list[int]:
        return [i for i in self.ids if self.nodes[i].parent is None]

    def to_json(self) -> dict:
        nodes = []
        for i in self.ids:
            node = self.nodes[i]
            sr = self.success_rate(i)
            nodes.append(
                {
                    "id": i,
                    "parent": node.parent,
                    "children": sorted(node.children),
                    "status": self.status(i).value,
                    "success_rate": sr,
                    "learnability": None if sr is None else learnability(sr),
                    "episodes_seen": node.episodes_seen,
                    "last_replayed_at": node.last_replayed_at,
                    "created_cycle": node.created_cycle,
                    "retired": node.retired,
                    "outcomes": [[s, self.registry.ordered(u)] for s, u in node.outcomes],
                    "description": node.description,
                    "source": serialize(node.program, self.registry),
                }
            )
        return {
            "window": self.window,
            "min_episodes": self.min_episodes,
            "thresholds": list(self.thresholds),
            "tau": self.tau,
            "beta": self.beta,
            "counter": self.counter,
            "nodes": nodes,
        }

    @classmethod
    def from_json(cls, data: dict, registry: AchievementRegistry | None = None) -> "Archive":
        archive = cls(
            window=data["window"],
            min_episodes=data["min_episodes"],
            thresholds=tuple(data["thresholds"]),
            tau=data["tau"],
            beta=data["beta"],
            registry=registry,
        )
        for entry in data["nodes"]:
            archive.insert(
                parse(entry["source"], archive.registry),
                description=entry["description"],
                node_id=entry["id"],
                cycle=entry.get("created_cycle", 0),
            )
            node = archive.nodes[entry["id"]]
            node.episodes_seen = entry["episodes_seen"]
            node.last_replayed_at = entry["last_replayed_at"]
            node.retired = entry.get("retired", False)
            node.outcomes.extend((s, frozenset(u)) for s, u in entry.get("outcomes", []))
            node.wins = sum(s for s, _ in node.outcomes)
        for entry in data["nodes"]:
            if entry["parent"] is not None:
                archive.link(entry["parent"], entry["id"])
        archive.counter = data["counter"]
        return archive

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    def to_dot(self) -> str:
        return archive_dot(self.to_json(), self.registry)


GOAL_COLORS = {"gather": "#4e79a7", "craft": "#f28e2b", "explore": "#59a14f", "combat": "#e15759"}


def goal_category(goal, registry: AchievementRegistry | None = None) -> str:
    """Category of the deepest achievement in ``goal``."""
    registry = registry or default_registry()
    deepest = registry.ordered(goal)[-1]
    if deepest == "DEFEAT_GUARD":
        return "combat"
    if deepest == "DESCEND_FLOOR":
        return "explore"
    if deepest.startswith("COLLECT_"):
        return "gather"
    return "craft"


def archive_dot(data: dict, registry: AchievementRegistry | None = None) -> str:
    """Graphviz lineage view: fill colour = goal category, node size grows with SR."""
    registry = registry or default_registry()
    lines = ["digraph archive {", "  node [shape=circle, style=filled, fontsize=10];"]
    for entry in data["nodes"]:
        program = parse(entry["source"], registry)
        category = goal_category(program.goal, registry)
        sr = entry["success_rate"]
        size = 0.4 + (sr or 0.0)
        label = f"{entry['id']}\\n{entry['status']}"
        lines.append(
            f'  n{entry["id"]} [label="{label}", fillcolor="{GOAL_COLORS[category]}", '
            f'width={size:.3f}, height={size:.3f}, tooltip="{program.name}"];'
        )
    for entry in data["nodes"]:
        if entry["parent"] is not None:
            lines.append(f"  n{entry['parent']} -> n{entry['id']};")
    lines.append("}")
    return "\n".join(lines) + "\n"
