"""The closed loop: parent selection, generation, compile check, training and
archive updates, with generation running one ticket ahead of training."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .archive import Archive
from .config import CurriculumConfig
from .dsl import CompileError, LevelProgram, parse, parse_file, serialize
from .generator import (
    BackendError,
    CandidateLevel,
    PerformanceProfile,
    compile_check,
    generate_batch,
    make_backend,
    mutate,
    INTENTS,
)
from .registry import AchievementRegistry, default_registry
from .trainer import (
    TARGET,
    BonusState,
    EpsilonSchedule,
    PolicyTable,
    evaluate_target,
    eval_seeds,
    plan_batch,
    run_episode,
)

logger = logging.getLogger(__name__)

SEED_NAMES = ("seed_collect", "seed_combat", "seed_crafting", "seed_survival")
TRAIN_SEED_LIMIT = 2**31


class Mode(str, Enum):
    DICODE = "dicode"
    DICODE_OL = "dicode-ol"
    TARGET_ONLY = "target-only"
    DR = "dr"
    PLR = "plr"

    @classmethod
    def parse(cls, text) -> "Mode":
        if isinstance(text, cls):
            return text
        key = str(text).lower().replace("_", "-")
        aliases = {"dicodeol": "dicode-ol", "targetonly": "target-only", "target": "target-only"}
        key = aliases.get(key, key)
        for m in cls:
            if m.value == key:
                return m
        raise ValueError(f"unknown mode {text!r}; choose from {', '.join(m.value for m in cls)}")

    @property
    def generates(self) -> bool:
        return self in (Mode.DICODE, Mode.DICODE_OL, Mode.PLR)


class RunExistsError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# seeds and bootstrap
# ---------------------------------------------------------------------------


def seed_paths() -> list[Path]:
    base = resources.files(__package__).joinpath("seeds")
    return [Path(str(base.joinpath(f"{n}.lvl"))) for n in SEED_NAMES]


def target_program(registry: AchievementRegistry | None = None) -> LevelProgram:
    text = resources.files(__package__).joinpath("seeds", "target.lvl").read_text()
    return parse(text, registry or default_registry())


def bootstrap(config: CurriculumConfig, paths=None, registry=None) -> Archive:
    """A fresh archive holding the seed programs as parentless nodes."""
    archive = Archive.from_config(config, registry)
    for path in paths or seed_paths():
        program = parse_file(path, archive.registry)
        archive.insert(program, description=f"seed level from {Path(path).name}")
    return archive


# ---------------------------------------------------------------------------
# generation tickets
# ---------------------------------------------------------------------------

IN_FLIGHT, DELIVERED, FAILED = "InFlight", "Delivered", "Failed"
PROCEED, BLOCK = "Proceed", "Block"


@dataclass
class GenerationTicket:
    issued_at_cycle: int
    parent: int | None
    status: str = IN_FLIGHT
    batch: list = field(default_factory=list)
    ready_at: int | None = None  # simulated delivery cycle (sequential mode)
    future: Future | None = None
    error: str = ""

    def poll(self, cycle: int) -> str:
        """Refresh the status as seen at the start of ``cycle``."""
        if self.status != IN_FLIGHT:
            return self.status
        if self.future is not None:
            if self.future.done():
                self._settle(self.future)
        elif self.ready_at is not None and cycle >= self.ready_at:
            self.status = DELIVERED if not self.error else FAILED
        return self.status

    def wait(self) -> int | None:
        """Block until delivery or failure; returns the simulated cycle it resolved at."""
        if self.future is not None:
            self._settle(self.future, block=True)
            return None
        self.status = DELIVERED if not self.error else FAILED
        return self.ready_at

    def _settle(self, fut: Future, block: bool = False):
        try:
            self.batch = fut.result() if block else fut.result(timeout=0)
            self.status = DELIVERED
        except Exception as exc:  # noqa: BLE001 - hard backend failure
            self.error = f"{type(exc).__name__}: {exc}"
            self.status = FAILED


def await_generation(ticket: GenerationTicket, cycles_elapsed: int, v: int) -> str:
    """Block once ``v - 1`` training cycles have passed without a delivery."""
    if ticket.status == IN_FLIGHT and cycles_elapsed >= v - 1:
        return BLOCK
    return PROCEED


class LatencyStub:
    """Wraps a backend so its batches arrive ``latency`` cycles after the
    issuing cycle ends (sequential mode), or never when ``fail`` is set."""

    def __init__(self, inner=None, latency: int = 0, fail: bool = False):
        self.inner = inner or make_backend("mutation")
        self.latency = latency
        self.fail = fail
        self.name = f"stub(latency={latency}{', failing' if fail else ''})"

    def describe(self, ctx, rng):
        if self.fail:
            raise RuntimeError("backend unavailable")
        return self.inner.describe(ctx, rng)

    def write_program(self, ctx, description, rng):
        return self.inner.write_program(ctx, description, rng)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    metrics: list
    archive: Archive
    policy: PolicyTable
    pipeline: "Pipeline"


class Pipeline:
    """One training run. All archive and policy writes happen on the calling thread."""

    def __init__(
        self,
        config: CurriculumConfig,
        mode: Mode | str,
        seed: int,
        *,
        backend=None,
        sequential: bool = True,
        paths=None,
        registry: AchievementRegistry | None = None,
    ):
        self.config = config
        self.mode = Mode.parse(mode)
        self.seed = seed
        self.registry = registry or default_registry()
        self.backend = backend if backend is not None else make_backend("mutation", self.registry)
        self.sequential = sequential
        self.seed_paths = [Path(p) for p in (paths or seed_paths())]
        self.archive = bootstrap(config, self.seed_paths, self.registry)
        self.target = target_program(self.registry)
        self.policy = PolicyTable(alpha=config.alpha, gamma=config.gamma)
        self.epsilon = EpsilonSchedule.from_config(config)
        self.bonus = BonusState(d=config.d)
        streams = np.random.SeedSequence(seed).spawn(4)
        self.rng_train = np.random.default_rng(streams[0])
        self.rng_gen = np.random.default_rng(streams[1])
        self.rng_replay = np.random.default_rng(streams[2])
        self.dr_pool = [int(s) for s in np.random.default_rng(streams[3]).integers(TRAIN_SEED_LIMIT, size=config.dr_pool_size)]
        self.eval_seeds = eval_seeds(config.eval_instances)
        self.env_steps = 0
        self.cycle = 0
        self.ticket: GenerationTicket | None = None
        self.metrics: list[dict] = []
        self.events: list[dict] = []
        self.blocks: list[int] = []
        self.target_perf: PerformanceProfile | None = None
        self.trained_seeds: list[int] = []
        self._executor = None if sequential else ThreadPoolExecutor(max_workers=1, thread_name_prefix="generator")
        self.plan_config = config
        if self.mode in (Mode.TARGET_ONLY, Mode.DR):
            self.plan_config = config.replace(target_fraction=1.0, new_fraction=0.0, replay_fraction=0.0)

    # -- generation ---------------------------------------------------------

    def _produce(self, parent, snapshot: Archive, rng) -> list[CandidateLevel]:
        cfg = self.config
        if self.mode is Mode.PLR:
            return self._random_mutations(snapshot, rng)
        return generate_batch(
            parent,
            snapshot,
            cfg.num_unique_new,
            cfg.surplus_factor,
            self.backend,
            rng,
            open_loop=self.mode is Mode.DICODE_OL,
            target_perf=None if self.mode is Mode.DICODE_OL else self.target_perf,
            few_shot_k=cfg.few_shot_k,
            rollout_steps=cfg.rollout_steps,
        )

    def _random_mutations(self, snapshot: Archive, rng) -> list[CandidateLevel]:
        """Levels for the PLR baseline: a random operator on a random archived
        level, no performance signal and no description phase."""
        cfg = self.config
        n = math.ceil(cfg.num_unique_new * cfg.surplus_factor - 1e-9)
        out = []
        ids = snapshot.ids
        for i in range(n):
            node = ids[rng.integers(len(ids))]
            intent = INTENTS[rng.integers(len(INTENTS))]
            child = mutate(snapshot[node].program, intent, rng, snapshot.registry)
            text = serialize(child, snapshot.registry)
            cand = CandidateLevel(i, f"intent={intent}\nrandom mutation of node {node}\n", text)
            cand.verdict = compile_check(text, cfg.rollout_steps, rng, snapshot.registry)
            cand.parent = node
            if cand.valid:
                out.append(cand)
        return out[: cfg.num_unique_new]

    def _issue(self, cycle: int) -> None:
        parent = None
        if self.mode is Mode.DICODE:
            parent = self.archive.sample_parent(self.rng_gen)
            if parent is None:
                self._event(cycle, "no-eligible-parent")
                return
        snapshot = self.archive.snapshot()
        rng = np.random.default_rng(int(self.rng_gen.integers(2**63)))
        ticket = GenerationTicket(cycle, parent)
        if self._executor is not None:
            ticket.future = self._executor.submit(self._produce, parent, snapshot, rng)
        else:
            try:
                ticket.batch = self._produce(parent, snapshot, rng)
            except BackendError as exc:
                ticket.error = str(exc)
            except Exception as exc:  # noqa: BLE001 - hard backend failure
                ticket.error = f"{type(exc).__name__}: {exc}"
            latency = getattr(self.backend, "latency", None)
            ticket.ready_at = cycle if latency is None else cycle + latency + 1
        self.ticket = ticket
        self._event(cycle, "issue", parent=parent)

    def _resolve(self, cycle: int) -> list[int]:
        """Apply the blocking rule; returns ids of freshly inserted levels."""
        ticket = self.ticket
        if ticket is None:
            return []
        status = ticket.poll(cycle)
        if status == IN_FLIGHT:
            if await_generation(ticket, cycle - ticket.issued_at_cycle, self.config.v) == PROCEED:
                return []
            self.blocks.append(cycle)
            self._event(cycle, "block", issued=ticket.issued_at_cycle)
            ticket.wait()
            status = ticket.status
        self.ticket = None
        if status == FAILED:
            self._event(cycle, "generation-failed", error=ticket.error)
            return []
        new_ids = []
        for cand in ticket.batch:
            parent = getattr(cand, "parent", ticket.parent)
            new_ids.append(self.archive.insert(cand.program, parent, cand.description, cycle=cycle))
        self._event(cycle, "deliver", parent=ticket.parent, n=len(new_ids))
        return new_ids

    # -- training -----------------------------------------------------------

    def _episode_seed(self, is_target: bool) -> int:
        if self.mode is Mode.DR and is_target:
            return self.dr_pool[int(self.rng_train.integers(len(self.dr_pool)))]
        return int(self.rng_train.integers(TRAIN_SEED_LIMIT))

    def _play(self, program, bonus, seed, is_target, slot):
        cfg = self.config
        return run_episode(
            program,
            self.policy,
            bonus,
            self.rng_train,
            episode_seed=seed,
            epsilon=self.epsilon,
            env_steps=self.env_steps,
            is_target=is_target,
            max_timesteps=cfg.target_max_timesteps if is_target else cfg.level_max_timesteps,
            source=TARGET if is_target else slot.node,
            registry=self.registry,
        )

    def run_cycle(self, t: int) -> bool:
        """Run cycle ``t``; returns False once the step budget is exhausted."""
        cfg = self.config
        if self.mode.generates and t % cfg.v == 0 and self.ticket is None:
            self._issue(t)
        new_ids = self._resolve(t) if self.mode.generates else []
        plan = plan_batch(t, new_ids, self.archive, self.plan_config, self.rng_replay)
        bonus = self.bonus.bonus
        target_returns = []
        for slot in plan.slots:
            is_target = slot.source == TARGET
            program = self.target if is_target else self.archive[slot.node].program
            for _ in range(slot.episodes):
                if self.env_steps >= cfg.budget_steps:
                    break
                seed = self._episode_seed(is_target)
                if is_target:
                    self.trained_seeds.append(seed)
                try:
                    stats = self._play(program, bonus, seed, is_target, slot)
                except CompileError as exc:
                    if is_target:
                        raise
                    self.archive.retire(slot.node)
                    self._event(t, "retired", node=slot.node, error=str(exc))
                    break
                self.env_steps += stats.steps
                if is_target:
                    target_returns.append(stats.ret)
                else:
                    self.archive.record_episode(slot.node, stats.success, stats.unlocked)
                    if stats.degenerate:
                        self._event(t, "degenerate-level", node=slot.node)
        if target_returns:
            self.bonus.update(float(np.mean(target_returns)))
        self.cycle = t + 1
        return self.env_steps < cfg.budget_steps

    def evaluate(self) -> dict:
        mean_return, sr = evaluate_target(
            self.policy, self.target, self.eval_seeds, max_timesteps=self.config.target_max_timesteps, registry=self.registry
        )
        self.target_perf = PerformanceProfile(sr[self.registry.ids[-1]], sr)
        record = {
            "cycle": self.cycle,
            "env_steps": self.env_steps,
            "mean_return": mean_return,
            "per_achievement_sr": sr,
            "archive_size": len(self.archive),
            "bonus": self.bonus.bonus,
        }
        self.metrics.append(record)
        return record

    def run(self, on_record=None) -> RunResult:
        try:
            t = 0
            while True:
                more = self.run_cycle(t)
                t += 1
                if not more or t % self.config.eval_interval == 0:
                    record = self.evaluate()
                    if on_record:
                        on_record(record)
                if not more:
                    break
        finally:
            if self._executor is not None:
                self._executor.shutdown(wait=True, cancel_futures=True)
        return RunResult(self.metrics, self.archive, self.policy, self)

    def _event(self, cycle, kind, **info):
        self.events.append({"cycle": cycle, "event": kind, **info})
        logger.debug("cycle %d: %s %s", cycle, kind, info)

    # -- persistence --------------------------------------------------------

    def manifest(self, out_dir=None) -> dict:
        return {
            "version": __version__,
            "mode": self.mode.value,
            "seed": self.seed,
            "backend": getattr(self.backend, "name", type(self.backend).__name__),
            "sequential": self.sequential,
            "seed_levels": [p.name if p.parent == seed_paths()[0].parent else str(p) for p in self.seed_paths],
            "output_dir": str(out_dir) if out_dir is not None else None,
            "config": self.config.to_dict(),
        }


def metrics_line(record: dict) -> str:
    return json.dumps(record, sort_keys=False, separators=(",", ":")) + "\n"


def prepare_out_dir(out_dir, force: bool = False) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise RunExistsError(f"{out} already holds a run; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_training(
    config: CurriculumConfig,
    mode,
    seed: int,
    *,
    out_dir=None,
    force: bool = False,
    backend=None,
    sequential: bool = True,
    paths=None,
    registry=None,
) -> RunResult:
    """Train one run; with ``out_dir`` also write the run files there."""
    out = prepare_out_dir(out_dir, force) if out_dir is not None else None
    pipe = Pipeline(config, mode, seed, backend=backend, sequential=sequential, paths=paths, registry=registry)
    if out is None:
        return pipe.run()
    (out / "manifest.json").write_text(json.dumps(pipe.manifest(out), indent=2) + "\n")
    with open(out / "metrics.jsonl", "w") as fh:
        result = pipe.run(on_record=lambda r: (fh.write(metrics_line(r)), fh.flush()))
    (out / "archive.json").write_text(pipe.archive.dumps())
    (out / "archive.dot").write_text(pipe.archive.to_dot())
    pipe.policy.save(out / "policy.bin")
    (out / "events.jsonl").write_text("".join(json.dumps(e) + "\n" for e in pipe.events))
    return result


def load_manifest(path) -> dict:
    data = json.loads(Path(path).read_text())
    for key in ("mode", "seed", "config"):
        if key not in data:
            raise ValueError(f"manifest {path} lacks {key!r}")
    return data


def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
