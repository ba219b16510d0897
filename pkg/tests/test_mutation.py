from __future__ import annotations

import pytest

from conftest import C, P, S, Y, FakeLLM, make_task, with_rules
from evoloop.blame import OracleBlamer, assign_blame, extract_diagnostics
from evoloop.errors import (
    MissingSection,
    MutatorOutputUnparseable,
    NoMissingTag,
    NoOpEdit,
    TargetMismatch,
    UnknownTarget,
)
from evoloop.gateway import Cassette, Gateway
from evoloop.mutation import (
    MAX_SPEC_CHARS,
    ModelMutator,
    MutationProposal,
    OracleMutator,
    append_rule,
    build_child,
    generate_feedback,
    parse_mutator_output,
)
from evoloop.policy import changed_modules
from evoloop.rollout import execute_episode


def _mutator_text(target="caller", spec="You call tools.\nRULE: schema-check"):
    return (f"1. Target module\n{target}\n\n2. Diagnosed error mode\nArguments skipped the schema.\n\n"
            f"3. Minimal edit summary\nAdd a schema checklist.\n\n4. Revised target module spec\n{spec}\n")


def _failing(env, runtime, seed, required, subgoals=1):
    task = make_task(subgoals=subgoals, required=required)
    ep = execute_episode(seed, task, env, runtime)
    return task, ep, extract_diagnostics(ep.trajectory)


def test_oracle_adds_missing_caller_tag(env, runtime, seed):
    task, ep, events = _failing(env, runtime, seed, {(0, C): {"schema-check"}})
    proposal = generate_feedback(ep, C, seed, events, OracleMutator({task.id: task}))
    assert proposal.revised_spec.endswith("RULE: schema-check")
    child = build_child(seed, proposal, 1)
    assert changed_modules(seed, child) == {C}
    assert execute_episode(child, task, env, runtime).reward == 1.0


def test_oracle_twice_is_a_noop(env, runtime, seed):
    task, ep, events = _failing(env, runtime, seed, {(0, C): {"schema-check"}})
    mutator = OracleMutator({task.id: task})
    child = build_child(seed, mutator.propose(ep, C, seed, events), 1)
    again = mutator.propose(ep, C, child, events)
    assert again.revised_spec == child.text(C)
    with pytest.raises(NoOpEdit):
        build_child(child, again, 2)


def test_oracle_off_target_uses_task_requirements(env, runtime, seed):
    task, ep, events = _failing(env, runtime, seed, {(0, S): {"pick"}, (0, P): set()})
    mutator = OracleMutator({task.id: task})
    with pytest.raises(NoMissingTag):
        mutator.propose(ep, P, seed, events)
    task2, ep2, events2 = _failing(env, runtime, seed, {(1, S): {"pick"}, (1, P): {"track"}}, subgoals=2)
    proposal = OracleMutator({task2.id: task2}).propose(ep2, P, seed, events2)
    assert proposal.revised_spec.endswith("RULE: track")


def test_append_rule_idempotent():
    assert append_rule("x\nRULE: a", "a") == "x\nRULE: a"
    assert append_rule("x", "a") == "x\nRULE: a"


def test_parse_all_four_sections():
    out = parse_mutator_output(_mutator_text())
    assert out.target is C
    assert out.error_mode == "Arguments skipped the schema."
    assert out.edit_summary == "Add a schema checklist."
    assert out.revised_spec == "You call tools.\nRULE: schema-check"


def test_spec_may_mention_section_headers():
    spec = "Rules:\n1. Target module names are lowercase\n2. Diagnosed error mode is logged"
    assert parse_mutator_output(_mutator_text(spec=spec)).revised_spec == spec


def test_unknown_target():
    with pytest.raises(UnknownTarget):
        parse_mutator_output(_mutator_text(target="router"))


def test_target_mismatch_keeps_blame_target():
    with pytest.warns(TargetMismatch):
        out = parse_mutator_output(_mutator_text(target="planner"), requested=C)
    assert out.target is C and out.warnings


def test_missing_and_oversized_sections():
    with pytest.raises(MissingSection):
        parse_mutator_output(_mutator_text().replace("3. Minimal edit summary", "Summary"))
    with pytest.raises(MissingSection):
        parse_mutator_output(_mutator_text(spec=""))
    with pytest.raises(MutatorOutputUnparseable):
        parse_mutator_output(_mutator_text(spec="x" * (MAX_SPEC_CHARS + 1)))


def test_chain_of_two_edits(seed):
    c1 = build_child(seed, MutationProposal(C, "", "", "caller v2", ""), 1)
    c2 = build_child(c1, MutationProposal(P, "", "", "planner v2", ""), 2)
    assert changed_modules(seed, c2) == {C, P}
    assert changed_modules(c1, c2) == {P}


def test_model_mutator_with_fake_llm(env, runtime, seed):
    task, ep, events = _failing(env, runtime, seed, {(0, Y): {"cite"}})
    report = assign_blame(ep, events, OracleBlamer())
    llm = FakeLLM()
    proposal = ModelMutator(Gateway(Cassette(), llm), "m", {task.id: task}).propose(ep, Y, seed, events, report)
    assert proposal.target is Y and proposal.revised_spec == seed.text(Y) + "\nRULE: cite"
    assert llm.calls == 1


def test_model_mutator_gives_up_after_retry(env, runtime, seed):
    task, ep, events = _failing(env, runtime, seed, {(0, Y): {"cite"}})

    class Garbled:
        calls = 0

        def send(self, request):
            Garbled.calls += 1
            return "Make the synthesizer better."

    with pytest.raises(MutatorOutputUnparseable):
        ModelMutator(Gateway(Cassette(), Garbled()), "m").propose(ep, Y, seed, events)
    assert Garbled.calls == 2
