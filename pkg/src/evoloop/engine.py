"""The generation loop: sample, roll out, blame, mutate, gate, select."""

from __future__ import annotations

import dataclasses
import logging
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from .blame import Blamer, assign_blame, extract_diagnostics, select_blame_episode
from .environment import ScriptedEnvironment, TaskInstance
from .errors import (
    ConfigError,
    EmptyPopulation,
    EmptySelectionSet,
    EmptySpec,
    EvoloopError,
    MutatorOutputUnparseable,
    NoMissingTag,
    NoOpEdit,
    RunAborted,
    UnnormalizedWeights,
)
from .mutation import Mutator, build_child, generate_feedback
from .policy import ModuleKind, PolicyGenome
from .rollout import EpisodeRecord, ModuleRuntime, evaluate_batch, execute_episode

logger = logging.getLogger(__name__)

WEIGHT_TOLERANCE = 1e-9

BACKENDS = ("scripted", "model")
BLAMERS = ("oracle", "random", "model")
MUTATORS = ("oracle", "model")
SELECTIONS = ("diversity", "greedy")
CASSETTE_MODES = ("record", "replay", "passthrough")


@dataclass
class RunConfig:
    max_generations: int = 8
    minibatch_size: int = 3
    rng_seed: int = 0
    backend: str = "scripted"
    model_id: str = ""
    blamer_model_id: str | None = None
    mutator_model_id: str | None = None
    temperature: float = 0.0
    max_steps: int = 25
    blamer: str = "oracle"
    mutator: str = "oracle"
    selection: str = "diversity"
    task_suite: str | None = None
    tool_suite: str | None = None
    seed_genome: str | None = None
    out_dir: str = "runs"
    cassette_path: str | None = None
    cassette_mode: str = "record"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("max_generations", "minibatch_size", "rng_seed", "max_steps"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        if self.max_generations < 0:
            raise ConfigError("max_generations must be non-negative")
        if self.minibatch_size < 1:
            raise ConfigError("minibatch_size must be positive")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if not isinstance(self.temperature, (int, float)) or self.temperature < 0:
            raise ConfigError("temperature must be a non-negative number")
        for name, allowed in (("backend", BACKENDS), ("blamer", BLAMERS), ("mutator", MUTATORS),
                              ("selection", SELECTIONS), ("cassette_mode", CASSETTE_MODES)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class PopulationEntry:
    genome: PolicyGenome
    win_frequency: float = 0.0
    selection_scores: dict[str, float] = field(default_factory=dict)

    @property
    def selection_mean(self) -> float:
        if not self.selection_scores:
            return 0.0
        return sum(self.selection_scores.values()) / len(self.selection_scores)

    def to_dict(self) -> dict[str, Any]:
        return {
            "genome": self.genome.to_dict(),
            "win_frequency": self.win_frequency,
            "selection_scores": dict(self.selection_scores),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PopulationEntry":
        return cls(
            genome=PolicyGenome.from_dict(data["genome"]),
            win_frequency=float(data["win_frequency"]),
            selection_scores={k: float(v) for k, v in data["selection_scores"].items()},
        )


@dataclass
class GenerationRecord:
    generation: int
    parent_id: str
    minibatch_task_ids: list[str]
    parent_mean: float
    child_id: str | None = None
    child_mean: float | None = None
    blame_target: ModuleKind | None = None
    accepted: bool = False
    population_ids_after: list[str] = field(default_factory=list)
    win_frequencies_after: dict[str, float] = field(default_factory=dict)
    best_id: str = ""
    best_selection_mean: float = 0.0
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.accepted and (self.child_mean is None or not self.child_mean > self.parent_mean):
            raise ValueError("an accepted child must beat its parent's mean")

    def to_dict(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        data["blame_target"] = self.blame_target.value if self.blame_target else None
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GenerationRecord":
        data = dict(data)
        target = data.get("blame_target")
        data["blame_target"] = ModuleKind.parse(target) if target else None
        return cls(**data)


def sample_parent(population: Sequence[PopulationEntry], rng: random.Random) -> PolicyGenome:
    """Categorical draw by win frequency, inverse CDF over creation order."""
    if not population:
        raise EmptyPopulation("cannot sample from an empty population")
    weights = [e.win_frequency for e in population]
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > WEIGHT_TOLERANCE:
        raise UnnormalizedWeights(f"win frequencies sum to {sum(weights)!r}")
    u = rng.random()
    cumulative = 0.0
    for entry in population:
        cumulative += entry.win_frequency
        if entry.win_frequency > 0 and u < cumulative:
            return entry.genome
    # u landed in the rounding gap above the last cumulative sum
    return next(e.genome for e in reversed(population) if e.win_frequency > 0)


def accept_child(parent_mean: float, child_mean: float) -> bool:
    for value in (parent_mean, child_mean):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"mean reward {value} outside [0, 1]")
    return child_mean > parent_mean


Evaluator = Callable[[PolicyGenome, TaskInstance], float]


def _fill_scores(population, selection_tasks, evaluator):
    for entry in population:
        for task in selection_tasks:
            if task.id not in entry.selection_scores:
                if evaluator is None:
                    raise ValueError(f"no selection score for {entry.genome.id} on {task.id}")
                entry.selection_scores[task.id] = evaluator(entry.genome, task)


def instance_winners(population: Sequence[PopulationEntry], selection_tasks: Sequence[TaskInstance]) -> list[int]:
    """Index of each task's winner; ties go to the earliest-created entry."""
    winners = []
    for task in selection_tasks:
        best = 0
        for i, entry in enumerate(population):
            if entry.selection_scores[task.id] > population[best].selection_scores[task.id]:
                best = i
        winners.append(best)
    return winners


def select_population(
    population: Sequence[PopulationEntry],
    selection_tasks: Sequence[TaskInstance],
    evaluator: Evaluator | None = None,
) -> tuple[list[PopulationEntry], dict[str, float]]:
    """Keep candidates that win at least one selection task.

    ``population`` must be in creation order. Win frequency is the share of
    selection tasks a candidate wins.
    """
    if not selection_tasks:
        raise EmptySelectionSet("selection set is empty")
    if not population:
        raise EmptyPopulation("population is empty")
    _fill_scores(population, selection_tasks, evaluator)
    winners = instance_winners(population, selection_tasks)
    counts = [0] * len(population)
    for i in winners:
        counts[i] += 1
    retained = []
    for entry, count in zip(population, counts):
        if count:
            entry.win_frequency = count / len(selection_tasks)
            retained.append(entry)
    return retained, {e.genome.id: e.win_frequency for e in retained}


def best_index(population: Sequence[PopulationEntry]) -> int:
    """Highest selection mean; the earliest-created candidate wins ties."""
    if not population:
        raise EmptyPopulation("population is empty")
    best = 0
    for i, entry in enumerate(population):
        if entry.selection_mean > population[best].selection_mean:
            best = i
    return best


def select_greedy(
    population: Sequence[PopulationEntry],
    selection_tasks: Sequence[TaskInstance],
    evaluator: Evaluator | None = None,
) -> tuple[list[PopulationEntry], dict[str, float]]:
    """Ablation rule: keep only the candidate with the best selection mean."""
    if not selection_tasks:
        raise EmptySelectionSet("selection set is empty")
    _fill_scores(population, selection_tasks, evaluator)
    keep = population[best_index(population)]
    keep.win_frequency = 1.0
    return [keep], {keep.genome.id: 1.0}


EpisodeHook = Callable[[EpisodeRecord, int, str], None]
RecordHook = Callable[[GenerationRecord, Sequence[PopulationEntry]], None]

# mutation failures that cost the generation its child but keep the run going
_SOFT_MUTATION_ERRORS = (NoMissingTag, NoOpEdit, EmptySpec, MutatorOutputUnparseable)


class Evolution:
    """Mutable run state for one evolutionary run."""

    def __init__(
        self,
        config: RunConfig,
        env: ScriptedEnvironment,
        runtime: ModuleRuntime,
        blamer: Blamer,
        mutator: Mutator,
        train: Sequence[TaskInstance],
        selection: Sequence[TaskInstance],
        seed: PolicyGenome,
        on_episode: EpisodeHook | None = None,
        on_generation: RecordHook | None = None,
    ):
        if not train or not selection:
            raise ConfigError("both task splits must be non-empty")
        if config.minibatch_size > len(train):
            raise ConfigError(f"minibatch_size {config.minibatch_size} exceeds {len(train)} training tasks")
        self.config = config
        self.env = env
        self.runtime = runtime
        self.blamer = blamer
        self.mutator = mutator
        self.train = list(train)
        self.selection = list(selection)
        self.rng = random.Random(config.rng_seed)
        self.on_episode = on_episode
        self.on_generation = on_generation
        self.cache: dict[tuple[str, str, str], float] = {}
        self.generation = 0
        self.history: list[GenerationRecord] = []
        # every child built, accepted or not, by id
        self.lineage: dict[str, PolicyGenome] = {seed.id: seed}
        self.population = [PopulationEntry(seed)]
        self._select()

    def _emit(self, episode: EpisodeRecord, phase: str) -> None:
        if self.on_episode is not None:
            self.on_episode(episode, self.generation, phase)

    def evaluate_selection(self, genome: PolicyGenome, task: TaskInstance) -> float:
        key = (genome.fingerprint, task.id, self.config.backend)
        if key not in self.cache:
            episode = execute_episode(genome, task, self.env, self.runtime)
            self._emit(episode, "selection")
            self.cache[key] = episode.reward
        return self.cache[key]

    def _select(self) -> None:
        rule = select_greedy if self.config.selection == "greedy" else select_population
        self.population, _ = rule(self.population, self.selection, self.evaluate_selection)

    @property
    def best(self) -> PopulationEntry:
        return self.population[best_index(self.population)]

    def step(self) -> GenerationRecord:
        self.generation += 1
        g = self.generation
        parent = sample_parent(self.population, self.rng)
        batch = self.rng.sample(self.train, self.config.minibatch_size)
        parent_mean, episodes = evaluate_batch(parent, batch, self.env, self.runtime)
        for ep in episodes:
            self._emit(ep, "parent")
        record = GenerationRecord(g, parent.id, [t.id for t in batch], parent_mean)

        blamed = select_blame_episode(episodes)
        if blamed is None:
            record.notes.append("all mini-batch rewards are 1; mutation skipped")
        else:
            diagnostics = extract_diagnostics(blamed.trajectory)
            report = assign_blame(blamed, diagnostics, self.blamer)
            record.blame_target = report.target
            if report.source == "fallback":
                record.notes.append("blame fallback: " + report.diagnosis)
            child = None
            try:
                proposal = generate_feedback(blamed, report.target, parent, diagnostics,
                                             self.mutator, report)
                record.notes.extend(proposal.warnings)
                child = build_child(parent, proposal, g)
                self.lineage.setdefault(child.id, child)
            except _SOFT_MUTATION_ERRORS as exc:
                record.notes.append(f"mutation failed: {type(exc).__name__}: {exc}")
            if child is not None:
                child_mean, child_eps = evaluate_batch(child, batch, self.env, self.runtime)
                for ep in child_eps:
                    self._emit(ep, "child")
                record.child_id = child.id
                record.child_mean = child_mean
                record.accepted = accept_child(parent_mean, child_mean)
                if record.accepted:
                    self.population.append(PopulationEntry(child))

        self._select()
        best = self.best
        record.population_ids_after = [e.genome.id for e in self.population]
        record.win_frequencies_after = {e.genome.id: e.win_frequency for e in self.population}
        record.best_id = best.genome.id
        record.best_selection_mean = best.selection_mean
        self.history.append(record)
        if self.on_generation is not None:
            self.on_generation(record, self.population)
        return record

    def run(self, generations: int | None = None) -> tuple[PolicyGenome, list[GenerationRecord]]:
        total = self.config.max_generations if generations is None else generations
        for _ in range(total):
            try:
                self.step()
            except EvoloopError as exc:
                logger.error("generation %d aborted: %s: %s", self.generation, type(exc).__name__, exc)
                raise RunAborted(f"generation {self.generation} failed: {type(exc).__name__}: {exc}",
                                 list(self.history), exc) from exc
        return self.best.genome, list(self.history)


def run_generations(
    config: RunConfig,
    env: ScriptedEnvironment,
    runtime: ModuleRuntime,
    blamer: Blamer,
    mutator: Mutator,
    train: Sequence[TaskInstance],
    selection: Sequence[TaskInstance],
    seed: PolicyGenome,
    on_episode: EpisodeHook | None = None,
    on_generation: RecordHook | None = None,
) -> tuple[PolicyGenome, list[GenerationRecord]]:
    evo = Evolution(config, env, runtime, blamer, mutator, train, selection, seed,
                    on_episode, on_generation)
    return evo.run()
