"""Run directories, append-only JSONL logs, snapshots and curve data."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .blame import extract_diagnostics, first_failure
from .engine import GenerationRecord, PopulationEntry, RunConfig
from .errors import IncompleteLogs, IoError, ParseError, SchemaVersionMismatch
from .policy import PIPELINE, ModuleKind
from .rollout import EpisodeRecord

SCHEMA_VERSION = 1

CONFIG_FILE = "config.json"
HISTORY_FILE = "history.jsonl"
EPISODES_FILE = "episodes.jsonl"
SNAPSHOT_FILE = "snapshot.json"
CASSETTE_FILE = "cassette.jsonl"
CURVES_FILE = "curves.csv"
ERRORS_FILE = "errors.csv"

CURVE_COLUMNS = ("generation", "best_selection_mean", "best_so_far", "population_size", "blamed_module")
ERROR_COLUMNS = ("generation",) + tuple(f"{k.value}%" for k in PIPELINE) + ("total%",)

_append_locks: dict[str, threading.Lock] = {}
_registry_lock = threading.Lock()


def _lock_for(path: Path) -> threading.Lock:
    key = str(path.resolve())
    with _registry_lock:
        return _append_locks.setdefault(key, threading.Lock())


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def append_jsonl(path: str | Path, row: Mapping[str, Any]) -> None:
    path = Path(path)
    line = dumps(row) + "\n"
    with _lock_for(path):
        try:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(line)
        except OSError as exc:
            raise IoError(f"cannot append to {path}: {exc}") from exc


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    """Rows of a JSONL log. A malformed final line is a partial write and is dropped."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    rows = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            if i == len(lines) - 1:
                break
            raise ParseError(f"{path}:{i + 1}: {exc}") from exc
    return rows


def write_json_atomic(path: str | Path, obj: Any) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def save_snapshot(population: Sequence[PopulationEntry], path: str | Path, generation: int | None = None) -> None:
    doc: dict[str, Any] = {"schema_version": SCHEMA_VERSION,
                           "population": [e.to_dict() for e in population]}
    if generation is not None:
        doc["generation"] = generation
    write_json_atomic(path, doc)


def load_snapshot(path: str | Path) -> list[PopulationEntry]:
    return read_snapshot(path)[0]


def read_snapshot(path: str | Path) -> tuple[list[PopulationEntry], int | None]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read snapshot {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    version = doc.get("schema_version") if isinstance(doc, dict) else None
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"snapshot schema_version {version!r}; expected {SCHEMA_VERSION}")
    return [PopulationEntry.from_dict(e) for e in doc["population"]], doc.get("generation")


def distinct_genomes(population: Sequence[PopulationEntry]) -> list[PopulationEntry]:
    """Drop entries whose spec texts duplicate an earlier entry's."""
    seen, out = set(), []
    for entry in population:
        if entry.genome.fingerprint not in seen:
            seen.add(entry.genome.fingerprint)
            out.append(entry)
    return out


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunDir:
    """One run's artifact set; logs in it are only ever appended to."""

    path: Path

    @classmethod
    def create(cls, root: str | Path, run_id: str) -> "RunDir":
        path = Path(root) / run_id
        if (path / HISTORY_FILE).exists() or (path / EPISODES_FILE).exists():
            raise IoError(f"run directory {path} already holds logs; pick a fresh run id")
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoError(f"cannot create {path}: {exc}") from exc
        return cls(path)

    def __truediv__(self, name: str) -> Path:
        return self.path / name

    @property
    def history(self) -> Path:
        return self.path / HISTORY_FILE

    @property
    def episodes(self) -> Path:
        return self.path / EPISODES_FILE

    @property
    def snapshot(self) -> Path:
        return self.path / SNAPSHOT_FILE

    @property
    def cassette(self) -> Path:
        return self.path / CASSETTE_FILE

    @property
    def config(self) -> Path:
        return self.path / CONFIG_FILE

    def write_config(self, config: RunConfig) -> None:
        write_json_atomic(self.config, config.to_dict())

    def log_episode(self, episode: EpisodeRecord, generation: int, phase: str) -> None:
        append_jsonl(self.episodes, {"generation": generation, "phase": phase, "episode": episode.to_dict()})

    def log_generation(self, record: GenerationRecord, population: Sequence[PopulationEntry]) -> None:
        append_jsonl(self.history, record.to_dict())
        save_snapshot(population, self.snapshot, record.generation)


def load_history(path: str | Path) -> list[GenerationRecord]:
    return [GenerationRecord.from_dict(row) for row in read_jsonl(path)]


def iter_episode_rows(path: str | Path) -> Iterator[dict[str, Any]]:
    yield from read_jsonl(path)


@dataclass(frozen=True)
class LearningCurvePoint:
    generation: int
    best_selection_mean: float
    best_so_far: float
    population_size: int
    blamed_module: ModuleKind | None = None

    def row(self) -> list[Any]:
        return [self.generation, f"{self.best_selection_mean:.6f}", f"{self.best_so_far:.6f}",
                self.population_size, self.blamed_module.value if self.blamed_module else ""]


def learning_curve(history: Sequence[GenerationRecord]) -> list[LearningCurvePoint]:
    points, running = [], 0.0
    for record in history:
        running = max(running, record.best_selection_mean)
        points.append(LearningCurvePoint(record.generation, record.best_selection_mean, running,
                                         len(record.population_ids_after), record.blame_target))
    return points


def failing_module(episode: EpisodeRecord) -> ModuleKind | None:
    """Module that first failed; a wrong final answer counts against the synthesizer."""
    if episode.reward >= 1.0:
        return None
    event = first_failure(extract_diagnostics(episode.trajectory))
    return event.module if event is not None else ModuleKind.SYNTHESIZER


def error_progression(
    history: Sequence[GenerationRecord], episode_rows: Iterable[Mapping[str, Any]]
) -> list[dict[str, float]]:
    """Per generation: share of mini-batch episodes failing in each module, plus overall."""
    by_gen: dict[int, list[EpisodeRecord]] = {}
    for row in episode_rows:
        if row.get("phase") == "parent":
            by_gen.setdefault(int(row["generation"]), []).append(EpisodeRecord.from_dict(row["episode"]))
    rows = []
    for record in history:
        episodes = by_gen.get(record.generation)
        if not episodes or len(episodes) != len(record.minibatch_task_ids):
            raise IncompleteLogs(f"episode log lacks the mini-batch of generation {record.generation}")
        counts = {k: 0 for k in PIPELINE}
        failed = 0
        for ep in episodes:
            module = failing_module(ep)
            if module is not None:
                counts[module] += 1
                failed += 1
        n = len(episodes)
        row = {"generation": record.generation}
        row.update({f"{k.value}%": 100.0 * counts[k] / n for k in PIPELINE})
        row["total%"] = 100.0 * failed / n
        rows.append(row)
    return rows


def write_curve_csv(points: Sequence[LearningCurvePoint], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        writer.writerows(p.row() for p in points)


def write_error_csv(rows: Sequence[Mapping[str, float]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ERROR_COLUMNS)
        for row in rows:
            writer.writerow([row["generation"]] + [f"{row[c]:.2f}" for c in ERROR_COLUMNS[1:]])
