"""Command-line entry point: evolve, eval, blame, report, replay."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Sequence

from .blame import assign_blame, extract_diagnostics
from .engine import Evolution, RunConfig, best_index
from .errors import ConfigError, EvoloopError, IoError, ParseError, RunAborted, UnknownCommand
from .gateway import Transport
from .persistence import (
    CURVES_FILE,
    ERRORS_FILE,
    RunDir,
    distinct_genomes,
    error_progression,
    learning_curve,
    load_history,
    read_jsonl,
    read_snapshot,
    write_curve_csv,
    write_error_csv,
)
from .policy import PolicyGenome
from .rollout import EpisodeRecord, evaluate_batch
from .suites import build_components, load_suite

logger = logging.getLogger("evoloop")

COMMANDS = ("evolve", "eval", "blame", "report", "replay")
_PATH_FIELDS = ("task_suite", "tool_suite", "seed_genome", "cassette_path")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON; missing fields take their defaults")
    p.add_argument("--seed", type=int, help="override rng_seed")
    p.add_argument("--backend", choices=("scripted", "model"))
    p.add_argument("--cassette-mode", choices=("record", "replay", "passthrough"))
    p.add_argument("--out", help="root directory for run directories (default: config out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evoloop", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")

    p = sub.add_parser("evolve", help="run the evolutionary loop")
    _add_run_flags(p)
    p.add_argument("--run-id", help="name of the run directory (default: derived from the config)")

    p = sub.add_parser("replay", help="re-run a recorded run with its cassette in replay mode")
    p.add_argument("run_dir", nargs="?", help="recorded run directory (uses its config.json and cassette.jsonl)")
    _add_run_flags(p)
    p.add_argument("--run-id")

    p = sub.add_parser("eval", help="score a genome on a task suite")
    _add_run_flags(p)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--snapshot", help="snapshot.json; scores its best entry unless --genome-id is given")
    source.add_argument("--genome", help="genome JSON file")
    p.add_argument("--genome-id")
    p.add_argument("--split", choices=("selection", "train", "all"), default="selection")

    p = sub.add_parser("blame", help="blame one logged episode")
    _add_run_flags(p)
    p.add_argument("--episodes", required=True, help="episodes.jsonl")
    p.add_argument("--line", type=int, default=1, help="1-based line number (default 1)")

    p = sub.add_parser("report", help="write learning-curve and error-progression CSVs and PNGs")
    p.add_argument("run_dir")
    p.add_argument("--out", help="output directory (default: the run directory)")
    p.add_argument("--no-plots", action="store_true")
    return parser


def _resolve_paths(data: dict, base: Path) -> dict:
    out = dict(data)
    for key in _PATH_FIELDS:
        value = out.get(key)
        if isinstance(value, str) and not value.startswith("builtin:") and not Path(value).is_absolute():
            candidate = base / value
            if candidate.exists():
                out[key] = str(candidate)
    return out


def load_config(path: str | None, args: argparse.Namespace | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data = _resolve_paths(data, Path(path).parent)
    config = RunConfig.from_dict(data)
    if args is not None:
        changes = {}
        if getattr(args, "seed", None) is not None:
            changes["rng_seed"] = args.seed
        if getattr(args, "backend", None):
            changes["backend"] = args.backend
        if getattr(args, "cassette_mode", None):
            changes["cassette_mode"] = args.cassette_mode
        if getattr(args, "out", None):
            changes["out_dir"] = args.out
        if changes:
            config = config.replace(**changes)
            config.validate()
    return config


def default_run_id(config: RunConfig, root: Path) -> str:
    body = {k: v for k, v in config.to_dict().items() if k != "out_dir"}
    digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:8]
    base = f"run-s{config.rng_seed}-{digest}"
    run_id, n = base, 1
    while (root / run_id).exists():
        n += 1
        run_id = f"{base}-{n}"
    return run_id


def run_evolve(config: RunConfig, run_id: str | None = None, transport: Transport | None = None) -> RunDir:
    root = Path(config.out_dir)
    run = RunDir.create(root, run_id or default_run_id(config, root))
    if config.cassette_path and Path(config.cassette_path).resolve() != run.cassette.resolve():
        try:
            shutil.copyfile(config.cassette_path, run.cassette)
        except OSError as exc:
            raise IoError(f"cannot copy cassette {config.cassette_path}: {exc}") from exc
    run.write_config(config)
    parts = build_components(config, run.cassette, transport)
    evo = Evolution(config, parts.env, parts.runtime, parts.blamer, parts.mutator, parts.train,
                    parts.selection, parts.seed, on_episode=run.log_episode,
                    on_generation=run.log_generation)
    try:
        evo.run()
    finally:
        if evo.history:
            write_curve_csv(learning_curve(evo.history), run / CURVES_FILE)
    best = evo.best
    print(f"run directory: {run.path}")
    print(f"best genome {best.genome.id} mean selection reward {best.selection_mean:.4f} "
          f"after {len(evo.history)} generation(s); population {len(evo.population)}")
    return run


def _cmd_evolve(args, transport) -> int:
    run_evolve(load_config(args.config, args), args.run_id, transport)
    return 0


def _cmd_replay(args, transport) -> int:
    if args.run_dir:
        source = Path(args.run_dir)
        config = load_config(args.config or str(source / "config.json"), args)
        config = config.replace(cassette_path=str(source / "cassette.jsonl"))
        if not args.out:
            config = config.replace(out_dir=str(source.parent))
    elif args.config:
        config = load_config(args.config, args)
        if not config.cassette_path:
            raise ConfigError("replay needs a run directory or a config with cassette_path")
    else:
        raise ConfigError("replay needs a run directory or --config")
    config = config.replace(cassette_mode="replay")
    run_evolve(config, args.run_id, transport)
    return 0


def _load_genome(args) -> PolicyGenome:
    if args.genome:
        try:
            return PolicyGenome.from_dict(json.loads(Path(args.genome).read_text(encoding="utf-8")))
        except OSError as exc:
            raise IoError(f"cannot read genome {args.genome}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ParseError(f"{args.genome}: {exc}") from exc
    population, _ = read_snapshot(args.snapshot)
    if args.genome_id:
        for entry in population:
            if entry.genome.id == args.genome_id:
                return entry.genome
        raise ConfigError(f"genome {args.genome_id} is not in {args.snapshot}")
    return population[best_index(population)].genome


def _cmd_eval(args, transport) -> int:
    config = load_config(args.config, args)
    parts = build_components(config, config.cassette_path, transport)
    genome = _load_genome(args)
    tasks = {"selection": parts.selection, "train": parts.train, "all": parts.train + parts.selection}[args.split]
    mean, episodes = evaluate_batch(genome, tasks, parts.env, parts.runtime)
    print(json.dumps({"genome_id": genome.id, "split": args.split, "mean_reward": mean,
                      "rewards": {e.task_id: e.reward for e in episodes}}, indent=2))
    return 0


def _cmd_blame(args, transport) -> int:
    config = load_config(args.config, args)
    rows = read_jsonl(args.episodes)
    if not 1 <= args.line <= len(rows):
        raise ConfigError(f"--line {args.line} is outside 1..{len(rows)}")
    row = rows[args.line - 1]
    episode = EpisodeRecord.from_dict(row.get("episode", row))
    parts = build_components(config, config.cassette_path, transport)
    report = assign_blame(episode, extract_diagnostics(episode.trajectory), parts.blamer)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def _cmd_report(args, transport) -> int:
    run = RunDir(Path(args.run_dir))
    out = Path(args.out) if args.out else run.path
    out.mkdir(parents=True, exist_ok=True)
    history = load_history(run.history)
    if not history:
        raise ParseError(f"{run.history} holds no generations")
    points = learning_curve(history)
    errors = error_progression(history, read_jsonl(run.episodes))
    write_curve_csv(points, out / CURVES_FILE)
    write_error_csv(errors, out / ERRORS_FILE)
    written = [out / CURVES_FILE, out / ERRORS_FILE]
    if not args.no_plots:
        from .plotting import plot_error_progression, plot_learning_curve

        written.append(plot_learning_curve(points, out / "curves.png"))
        written.append(plot_error_progression(errors, out / "errors.png"))
    for path in written:
        print(path)
    if run.snapshot.exists():
        population, _ = read_snapshot(run.snapshot)
        print(f"population: {len(population)} entries, {len(distinct_genomes(population))} distinct")
    return 0


_HANDLERS = {"evolve": _cmd_evolve, "eval": _cmd_eval, "blame": _cmd_blame,
             "report": _cmd_report, "replay": _cmd_replay}


def main(argv: Sequence[str] | None = None, transport: Transport | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command = next((a for a in argv if not a.startswith("-")), None)
    try:
        if command not in COMMANDS:
            parser.print_usage(sys.stderr)
            raise UnknownCommand(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return _HANDLERS[args.command](args, transport)
    except RunAborted as exc:
        print(f"RunAborted: {exc}", file=sys.stderr)
        return 1
    except (UnknownCommand, ConfigError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except EvoloopError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
