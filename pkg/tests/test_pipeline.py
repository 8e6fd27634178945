import json

import pytest

from codecurriculum.pipeline import (
    BLOCK,
    DELIVERED,
    FAILED,
    IN_FLIGHT,
    PROCEED,
    TRAIN_SEED_LIMIT,
    GenerationTicket,
    LatencyStub,
    Mode,
    Pipeline,
    RunExistsError,
    await_generation,
    bootstrap,
    read_metrics,
    run_training,
    seed_paths,
)
from codecurriculum.dsl import ParseError
from codecurriculum.trainer import EVAL_SEED_BASE, TARGET

from conftest import StubBackend


@pytest.mark.parametrize(
    "text,mode",
    [("dicode", Mode.DICODE), ("DiCode-OL", Mode.DICODE_OL), ("target_only", Mode.TARGET_ONLY), ("targetonly", Mode.TARGET_ONLY), ("DR", Mode.DR), ("plr", Mode.PLR)],
)
def test_mode_parse(text, mode):
    assert Mode.parse(text) is mode


def test_mode_parse_rejects_unknown():
    with pytest.raises(ValueError):
        Mode.parse("poet")


def test_bootstrap_has_four_roots(tiny_config):
    archive = bootstrap(tiny_config)
    assert len(archive) == 4
    assert all(archive[i].parent is None for i in archive.ids)


def test_corrupt_seed_aborts(tiny_config, tmp_path):
    bad = tmp_path / "bad.lvl"
    bad.write_text('level "bad" { goal { COLLECT_WOOD }')
    with pytest.raises(ParseError):
        bootstrap(tiny_config, [*seed_paths()[:3], bad])


# ---------------------------------------------------------------------------
# blocking rule
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("v", [2, 3, 4])
@pytest.mark.parametrize("latency", range(5))
def test_blocking_matrix_on_tickets(v, latency):
    ticket = GenerationTicket(issued_at_cycle=10, parent=None, ready_at=10 + latency + 1)
    blocked = False
    for k in range(v):
        if ticket.poll(10 + k) != IN_FLIGHT:
            break
        if await_generation(ticket, k, v) == BLOCK:
            blocked = True
            break
    assert blocked == (latency >= v - 1)


def test_await_generation_examples():
    t = GenerationTicket(0, None)
    assert await_generation(t, 0, 2) == PROCEED
    assert await_generation(t, 1, 2) == BLOCK
    assert await_generation(t, 1, 3) == PROCEED
    t.status = DELIVERED
    assert await_generation(t, 5, 2) == PROCEED


@pytest.mark.parametrize("v", [2, 3, 4])
@pytest.mark.parametrize("latency", range(5))
def test_blocking_matrix_in_pipeline(tiny_config, v, latency):
    pipe = Pipeline(tiny_config.replace(v=v), Mode.DICODE_OL, 0, backend=LatencyStub(latency=latency))
    for t in range(v):
        pipe.run_cycle(t)
    assert bool(pipe.blocks) == (latency >= v - 1)


def test_sequential_generation_delivers_same_cycle(tiny_config):
    pipe = Pipeline(tiny_config, Mode.DICODE_OL, 0)
    pipe.run_cycle(0)
    kinds = [e["event"] for e in pipe.events]
    assert kinds[:2] == ["issue", "deliver"]
    assert len(pipe.archive) > 4
    assert not pipe.blocks


def test_failing_backend_stays_live(tiny_config):
    result = Pipeline(tiny_config, Mode.DICODE_OL, 0, backend=LatencyStub(fail=True)).run()
    assert result.metrics[-1]["env_steps"] >= tiny_config.budget_steps
    assert len(result.archive) == 4
    assert any(e["event"] == "generation-failed" for e in result.pipeline.events)


def test_failing_backend_threaded(tiny_config):
    pipe = Pipeline(tiny_config, Mode.DICODE_OL, 0, backend=LatencyStub(fail=True), sequential=False)
    result = pipe.run()
    assert result.metrics[-1]["env_steps"] >= tiny_config.budget_steps


def test_threaded_run_completes(tiny_config):
    result = Pipeline(tiny_config, Mode.DICODE_OL, 1, sequential=False).run()
    assert len(result.archive) > 4


# ---------------------------------------------------------------------------
# modes
# ---------------------------------------------------------------------------


def test_target_only_issues_no_tickets(tiny_config):
    result = Pipeline(tiny_config, Mode.TARGET_ONLY, 0).run()
    assert not result.pipeline.events
    assert len(result.archive) == 4
    assert all(n.episodes_seen == 0 for n in result.archive.nodes.values())


def test_dr_draws_from_fixed_pool(tiny_config):
    pipe = Pipeline(tiny_config, Mode.DR, 0)
    pipe.run()
    assert pipe.trained_seeds
    assert set(pipe.trained_seeds) <= set(pipe.dr_pool)
    assert len(pipe.dr_pool) == tiny_config.dr_pool_size


def test_plr_never_describes(tiny_config):
    backend = StubBackend()
    pipe = Pipeline(tiny_config, Mode.PLR, 0, backend=backend)
    result = pipe.run()
    assert backend.describe_calls == 0
    assert len(result.archive) > 4
    assert all(result.archive[i].parent is not None for i in result.archive.ids[4:])


def test_open_loop_builds_context_without_feedback(tiny_config, monkeypatch):
    import codecurriculum.pipeline as pipeline_mod

    calls = []
    real = pipeline_mod.generate_batch

    def spy(*args, **kwargs):
        calls.append(kwargs)
        return real(*args, **kwargs)

    monkeypatch.setattr(pipeline_mod, "generate_batch", spy)
    Pipeline(tiny_config, Mode.DICODE_OL, 0).run()
    assert calls
    assert all(c["open_loop"] and c["target_perf"] is None for c in calls)


def test_dicode_waits_for_an_eligible_parent(tiny_config):
    pipe = Pipeline(tiny_config, Mode.DICODE, 0)
    pipe.run_cycle(0)
    assert pipe.events[0]["event"] == "no-eligible-parent"


def test_dicode_grows_lineage(tiny_config):
    config = tiny_config.replace(budget_steps=20_000, updates_per_cycle=40)
    result = Pipeline(config, Mode.DICODE, 0).run()
    children = [i for i in result.archive.ids if result.archive[i].parent is not None]
    assert children


def test_tickets_issued_every_v_cycles(tiny_config):
    pipe = Pipeline(tiny_config.replace(v=3), Mode.DICODE_OL, 0)
    for t in range(9):
        pipe.run_cycle(t)
    assert [e["cycle"] for e in pipe.events if e["event"] == "issue"] == [0, 3, 6]


# ---------------------------------------------------------------------------
# accounting and outputs
# ---------------------------------------------------------------------------


def test_budget_and_seed_ranges(tiny_config):
    pipe = Pipeline(tiny_config, Mode.DICODE_OL, 0)
    result = pipe.run()
    last = result.metrics[-1]
    assert tiny_config.budget_steps <= last["env_steps"] < tiny_config.budget_steps + tiny_config.target_max_timesteps
    assert all(s < TRAIN_SEED_LIMIT for s in pipe.trained_seeds)
    assert all(s >= EVAL_SEED_BASE for s in pipe.eval_seeds)


def test_eval_cadence(tiny_config):
    result = Pipeline(tiny_config, Mode.TARGET_ONLY, 0).run()
    cycles = [r["cycle"] for r in result.metrics]
    assert all(c % tiny_config.eval_interval == 0 for c in cycles[:-1])
    assert cycles == sorted(set(cycles))


def test_run_outputs(tiny_config, tmp_path):
    out = tmp_path / "run"
    run_training(tiny_config, "dicode-ol", 3, out_dir=out)
    for name in ("manifest.json", "metrics.jsonl", "archive.json", "archive.dot", "policy.bin", "events.jsonl"):
        assert (out / name).is_file(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["mode"] == "dicode-ol" and manifest["seed"] == 3
    records = read_metrics(out)
    assert set(records[0]) == {"cycle", "env_steps", "mean_return", "per_achievement_sr", "archive_size", "bonus"}
    with pytest.raises(RunExistsError):
        run_training(tiny_config, "dicode-ol", 3, out_dir=out)
    run_training(tiny_config, "dicode-ol", 3, out_dir=out, force=True)
    assert read_metrics(out) == records


def test_sequential_runs_repeat_exactly(tiny_config):
    a = Pipeline(tiny_config, Mode.DICODE_OL, 5).run()
    b = Pipeline(tiny_config, Mode.DICODE_OL, 5).run()
    assert a.metrics == b.metrics
    assert a.policy.digest() == b.policy.digest()
    assert a.archive.dumps() == b.archive.dumps()


def test_target_episodes_tagged(tiny_config):
    pipe = Pipeline(tiny_config, Mode.TARGET_ONLY, 0)
    stats = pipe._play(pipe.target, 5.0, 1, True, None)
    assert stats.source == TARGET
