from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_task
from evoloop.blame import OracleBlamer
from evoloop.engine import (
    Evolution,
    GenerationRecord,
    PopulationEntry,
    RunConfig,
    accept_child,
    best_index,
    run_generations,
    sample_parent,
    select_greedy,
    select_population,
)
from evoloop.errors import (
    ConfigError,
    EmptyPopulation,
    EmptySelectionSet,
    EvoloopError,
    RunAborted,
    UnnormalizedWeights,
)
from evoloop.mutation import OracleMutator
from evoloop.policy import new_seed_genome
from evoloop.suites import build_components


def _genome(tag):
    return new_seed_genome({"planner": tag, "selector": "s", "caller": "c", "synthesizer": "y"})


def _entries(*score_lists):
    tasks = [make_task(f"s{i}") for i in range(len(score_lists[0]))]
    pop = [PopulationEntry(_genome(f"p{j}"), 0.0, {t.id: v for t, v in zip(tasks, scores)})
           for j, scores in enumerate(score_lists)]
    return pop, tasks


def test_defaults():
    config = RunConfig.from_dict({})
    assert (config.max_generations, config.minibatch_size) == (8, 3)
    assert config.selection == "diversity" and config.blamer == "oracle"


@pytest.mark.parametrize("data", [{"bogus": 1}, {"minibatch_size": 0}, {"backend": "gpu"},
                                  {"max_generations": "8"}, {"temperature": -1}])
def test_bad_config(data):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(data)


@pytest.mark.parametrize("parent, child, ok", [(0.5, 0.75, True), (0.5, 0.5, False), (1.0, 1.0, False),
                                               (0.75, 0.5, False)])
def test_accept_child(parent, child, ok):
    assert accept_child(parent, child) is ok


def test_worked_selection_example():
    pop, tasks = _entries([1, 0.5, 1, 0], [0.5, 1, 1, 1])
    kept, weights = select_population(pop, tasks)
    assert [e.genome.id for e in kept] == [pop[0].genome.id, pop[1].genome.id]
    assert weights == {pop[0].genome.id: 0.5, pop[1].genome.id: 0.5}


def test_dominated_candidate_is_pruned():
    pop, tasks = _entries([1, 1], [0.5, 0.5])
    kept, weights = select_population(pop, tasks)
    assert kept == [pop[0]] and weights == {pop[0].genome.id: 1.0}


def test_single_candidate_kept():
    pop, tasks = _entries([0, 0, 0])
    kept, weights = select_population(pop, tasks)
    assert kept == pop and list(weights.values()) == [1.0]


def test_selection_guards():
    pop, tasks = _entries([1])
    with pytest.raises(EmptySelectionSet):
        select_population(pop, [])
    with pytest.raises(EmptyPopulation):
        select_population([], tasks)


def test_greedy_keeps_best_mean():
    pop, tasks = _entries([1, 0.5, 1, 0], [0.5, 1, 1, 1])
    kept, _ = select_greedy(pop, tasks)
    assert kept == [pop[1]] and best_index(pop) == 1


@given(st.lists(st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=4, max_size=4),
                min_size=1, max_size=6))
def test_selection_properties(score_lists):
    pop, tasks = _entries(*score_lists)
    kept, weights = select_population(pop, tasks)
    assert abs(sum(weights.values()) - 1.0) < 1e-9
    assert all(w >= 1 / len(tasks) for w in weights.values())
    # every task's best score survives selection
    for t in tasks:
        assert max(e.selection_scores[t.id] for e in kept) == max(e.selection_scores[t.id] for e in pop)


def test_sample_parent_frequencies():
    pop, _ = _entries([1], [1])
    pop[0].win_frequency = pop[1].win_frequency = 0.5
    rng = random.Random(0)
    draws = [sample_parent(pop, rng) for _ in range(10_000)]
    assert abs(draws.count(pop[0].genome) - 5000) <= 200
    pop[0].win_frequency, pop[1].win_frequency = 1.0, 0.0
    assert all(sample_parent(pop, rng) is pop[0].genome for _ in range(10_000))


def test_sample_parent_guards():
    pop, _ = _entries([1], [1])
    pop[0].win_frequency = pop[1].win_frequency = 0.3
    with pytest.raises(UnnormalizedWeights):
        sample_parent(pop, random.Random(0))
    with pytest.raises(EmptyPopulation):
        sample_parent([], random.Random(0))


def test_accepted_record_must_improve():
    with pytest.raises(ValueError):
        GenerationRecord(1, "p", ["a"], 0.5, "c", 0.5, accepted=True)
    record = GenerationRecord(1, "p", ["a"], 0.5, "c", 0.75, accepted=True)
    assert GenerationRecord.from_dict(record.to_dict()) == record


def _evolution(config, **hooks):
    parts = build_components(config)
    return Evolution(config, parts.env, parts.runtime, parts.blamer, parts.mutator, parts.train,
                     parts.selection, parts.seed, **hooks)


def test_zero_budget_returns_seed():
    config = RunConfig(max_generations=0)
    parts = build_components(config)
    best, history = run_generations(config, parts.env, parts.runtime, parts.blamer, parts.mutator,
                                    parts.train, parts.selection, parts.seed)
    assert best == parts.seed and history == []


def test_convergence_run_records():
    evo = _evolution(RunConfig(max_generations=40))
    best, history = evo.run()
    assert len(history) == 40
    assert history[-1].best_selection_mean == 1.0
    curve = [r.best_selection_mean for r in history]
    assert curve == sorted(curve)
    for r in history:
        assert len(r.minibatch_task_ids) == 3
        if r.accepted:
            assert r.child_mean > r.parent_mean


def test_selection_scores_are_cached():
    calls = []
    evo = _evolution(RunConfig(max_generations=10),
                     on_episode=lambda ep, g, phase: calls.append((ep.genome_id, ep.task_id, phase)))
    evo.run()
    selection = [c for c in calls if c[2] == "selection"]
    assert len(selection) == len(set(selection))


def test_minibatch_larger_than_train():
    with pytest.raises(ConfigError):
        _evolution(RunConfig(minibatch_size=7))


def test_hard_errors_abort_with_history():
    config = RunConfig(max_generations=5)
    parts = build_components(config)

    class Broken(OracleMutator):
        def propose(self, *args, **kwargs):
            raise EvoloopError("mutator exploded")

    evo = Evolution(config, parts.env, parts.runtime, OracleBlamer(), Broken(parts.tasks),
                    parts.train, parts.selection, parts.seed)
    with pytest.raises(RunAborted) as info:
        evo.run()
    assert info.value.history == [] and isinstance(info.value.cause, EvoloopError)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_single_module_lineage_for_any_seed(rng_seed):
    evo = _evolution(RunConfig(max_generations=12, rng_seed=rng_seed))
    genomes = {evo.population[0].genome.id: evo.population[0].genome}
    evo.on_generation = lambda record, pop: genomes.update({e.genome.id: e.genome for e in pop})
    evo.run()
    for genome in genomes.values():
        if genome.parent_id is not None and genome.parent_id in genomes:
            parent = genomes[genome.parent_id]
            changed = [k for k in genome.specs if genome.text(k) != parent.text(k)]
            assert changed == [genome.mutated_module]
