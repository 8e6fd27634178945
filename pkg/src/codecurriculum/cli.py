"""Command-line entry point: train, eval, gen-test, archive-export, plot-data."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .archive import Archive, archive_dot
from .config import ConfigError, CurriculumConfig, default_config
from .dsl import CompileError, ParseError, SemanticError, parse_file, serialize
from .generator import INTENTS, BackendError, generate_batch, make_backend
from .pipeline import (
    Mode,
    RunExistsError,
    load_manifest,
    read_metrics,
    run_training,
    target_program,
)
from .registry import default_registry
from .trainer import EVAL_SEED_BASE, PolicyTable, eval_seeds, evaluate_target

log = logging.getLogger("codecurriculum")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="codecurriculum", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="run one curriculum or baseline training run")
    tr.add_argument("--config", type=Path, help="JSON config with every field set")
    tr.add_argument("--manifest", type=Path, help="replay the settings of an earlier run")
    tr.add_argument("--mode", help="dicode, dicode-ol, target-only, dr or plr")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out", type=Path, required=True)
    tr.add_argument("--backend", default="mutation", choices=("mutation", "remote"))
    tr.add_argument("--sequential", action="store_true", help="generate inline, fully reproducible")
    tr.add_argument("--force", action="store_true", help="overwrite an existing run directory")

    ev = sub.add_parser("eval", help="evaluate a saved policy on held-out target instances")
    ev.add_argument("--policy", type=Path, required=True)
    ev.add_argument("--instances", type=int, default=64)
    ev.add_argument("--seeds", type=Path, help="JSON list of evaluation seeds (default: the held-out set)")
    ev.add_argument("--max-timesteps", type=int, default=400)

    gt = sub.add_parser("gen-test", help="generate and compile-check levels from one parent")
    gt.add_argument("--backend", default="mutation", choices=("mutation", "remote"))
    gt.add_argument("--parent", type=Path, required=True)
    gt.add_argument("--n", type=int, default=10)
    gt.add_argument("--out", type=Path)
    gt.add_argument("--intent", choices=INTENTS)
    gt.add_argument("--seed", type=int, default=0)

    ax = sub.add_parser("archive-export", help="re-export a run's archive")
    ax.add_argument("--run", type=Path, required=True)
    ax.add_argument("--format", choices=("json", "dot"), default="json")
    ax.add_argument("--out", type=Path)

    pd = sub.add_parser("plot-data", help="flatten metrics.jsonl into CSV")
    pd.add_argument("--run", type=Path, required=True)
    pd.add_argument("--out", type=Path)
    return ap


def _emit(text: str, out: Path | None):
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def cmd_train(args) -> int:
    if args.manifest is not None:
        manifest = load_manifest(args.manifest)
        config = CurriculumConfig.from_dict(manifest["config"])
        mode = args.mode or manifest["mode"]
        seed = args.seed if args.seed is not None else manifest["seed"]
        sequential = args.sequential or manifest.get("sequential", True)
    else:
        if args.config is None or args.mode is None or args.seed is None:
            raise UsageError("train needs --config, --mode and --seed (or --manifest)")
        config = CurriculumConfig.load(args.config)
        mode, seed, sequential = args.mode, args.seed, args.sequential
    try:
        mode = Mode.parse(mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    backend = make_backend(args.backend)

    run_training(config, mode, seed, out_dir=args.out, force=args.force, backend=backend, sequential=sequential)
    final = read_metrics(args.out)[-1]
    log.info("done: %d steps, final target return %.3f, archive %d", final["env_steps"], final["mean_return"], final["archive_size"])
    print(json.dumps({"out": str(args.out), "final": final}))
    return 0


def _load_seeds(path: Path | None, n: int) -> list[int]:
    if path is None:
        return eval_seeds(n)
    seeds = json.loads(path.read_text())
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise UsageError(f"{path}: expected a JSON list of integers")
    if len(seeds) < n:
        raise UsageError(f"{path}: {len(seeds)} seeds for {n} instances")
    if any(s < EVAL_SEED_BASE for s in seeds[:n]):
        raise UsageError(f"{path}: evaluation seeds must be at least {EVAL_SEED_BASE}")
    return seeds[:n]


def cmd_eval(args) -> int:
    if args.instances < 1:
        raise UsageError("--instances must be positive")
    seeds = _load_seeds(args.seeds, args.instances)
    policy = PolicyTable.load(args.policy)
    registry = default_registry()
    mean_return, sr = evaluate_target(
        policy, target_program(registry), seeds, max_timesteps=args.max_timesteps, registry=registry
    )
    print(json.dumps({"instances": len(seeds), "mean_return": mean_return, "per_achievement_sr": sr}, indent=2))
    return 0


def cmd_gen_test(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be positive")
    registry = default_registry()
    parent = parse_file(args.parent, registry)
    config = default_config()
    archive = Archive.from_config(config, registry)
    pid = archive.insert(parent, description=f"parent from {args.parent.name}")
    backend = make_backend(args.backend, registry)
    rng = np.random.default_rng(args.seed)
    record: list = []
    valid = generate_batch(
        pid,
        archive,
        args.n,
        1.0,
        backend,
        rng,
        few_shot_k=config.few_shot_k,
        rollout_steps=config.rollout_steps,
        record=record,
        intent_override=args.intent,
    )
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        for k, cand in enumerate(valid):
            (args.out / f"level_{k:03d}.lvl").write_text(serialize(cand.program, registry))
    report = {
        "candidates": len(record),
        "valid": len(valid),
        "rejected": {},
    }
    for cand in record:
        if not cand.valid:
            reason = getattr(cand.verdict, "reason", "unknown")
            report["rejected"][reason] = report["rejected"].get(reason, 0) + 1
    print(json.dumps(report, indent=2))
    return 0


def cmd_archive_export(args) -> int:
    path = args.run / "archive.json" if args.run.is_dir() else args.run
    data = json.loads(path.read_text())
    if args.format == "json":
        _emit(json.dumps(data, indent=2) + "\n", args.out)
    else:
        _emit(archive_dot(data), args.out)
    return 0


def cmd_plot_data(args) -> int:
    records = read_metrics(args.run)
    if not records:
        raise RuntimeError(f"{args.run}: metrics.jsonl is empty")
    achievements = list(records[0]["per_achievement_sr"])
    fields = ["cycle", "env_steps", "mean_return", "archive_size", "bonus"] + [f"sr_{a}" for a in achievements]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for r in records:
        writer.writerow([r["cycle"], r["env_steps"], r["mean_return"], r["archive_size"], r["bonus"]] + [r["per_achievement_sr"][a] for a in achievements])
    _emit(buf.getvalue(), args.out)
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gen-test": cmd_gen_test,
    "archive-export": cmd_archive_export,
    "plot-data": cmd_plot_data,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ParseError, SemanticError, CompileError, BackendError, RunExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
