from __future__ import annotations

import pytest

from conftest import C, P, S, Y, make_task, with_rules
from evoloop.environment import OutcomeFlag
from evoloop.errors import EmptyBatch, RuntimeFailure, TransportError
from evoloop.gateway import Cassette, Gateway
from evoloop.rollout import (
    ActionKind,
    EpisodeRecord,
    ModelRuntime,
    evaluate_batch,
    execute_episode,
)


def test_fully_satisfied_task(env, runtime, seed):
    task = make_task(required={(0, P): {"a"}, (0, C): {"b"}})
    genome = with_rules(seed, {P: ["a"], C: ["b"]})
    ep = execute_episode(genome, task, env, runtime)
    assert ep.reward == 1.0
    kinds = [s.action.kind for s in ep.trajectory]
    assert kinds == [ActionKind.REASON, ActionKind.REASON, ActionKind.TOOL_CALL, ActionKind.REASON, ActionKind.FINISH]
    assert [s.acting_module for s in ep.trajectory][:4] == [P, S, C, Y]
    assert "GOLD-42" in ep.final_answer


def test_missing_selector_tag_truncates(env, runtime, seed):
    task = make_task(required={(0, S): {"pick"}})
    ep = execute_episode(seed, task, env, runtime)
    assert ep.reward == 0.25
    assert len(ep.trajectory) == 2
    assert ep.trajectory.steps[-1].observation.outcome_flags == {OutcomeFlag.WRONG_TOOL}
    assert ep.final_answer == ""


def test_two_subgoals_failing_at_second_planner(env, runtime, seed):
    task = make_task(subgoals=2, required={(1, P): {"track"}})
    ep = execute_episode(seed, task, env, runtime)
    assert ep.stages_passed == 4 and ep.reward == 0.5


def test_scripted_rollout_is_deterministic(env, runtime, seed):
    task = make_task(subgoals=2, required={(1, C): {"x"}})
    a = execute_episode(seed, task, env, runtime)
    b = execute_episode(seed, task, env, runtime)
    assert a == b and a.to_dict() == b.to_dict()
    assert EpisodeRecord.from_dict(a.to_dict()) == a


def test_evaluate_batch_mean(env, runtime, seed, convergence):
    import random

    train, _ = convergence
    batch = random.Random(0).sample(train, 3)
    mean, episodes = evaluate_batch(seed, batch, env, runtime)
    assert mean == pytest.approx(sum(e.reward for e in episodes) / 3)
    with pytest.raises(EmptyBatch):
        evaluate_batch(seed, [], env, runtime)


def test_step_indices_and_invariants(env, runtime, seed, convergence):
    for task in convergence[0] + convergence[1]:
        ep = execute_episode(seed, task, env, runtime)
        steps = ep.trajectory.steps
        assert [s.index for s in steps] == list(range(len(steps)))
        for s in steps:
            if s.action.kind is ActionKind.TOOL_CALL:
                assert s.observation is not None
            if s.action.kind is ActionKind.FINISH:
                assert s.observation is None and s is steps[-1]
        assert ep.reward == env.score(task, ep.final_answer, ep.stages_passed)


class _Failing:
    def send(self, request):
        raise TransportError("boom", 503)


class _Scripted:
    def __init__(self, replies):
        self.replies = list(replies)

    def send(self, request):
        return self.replies.pop(0)


def test_model_runtime_failure_becomes_exec_error(env, seed):
    runtime = ModelRuntime(Gateway(Cassette(), _Failing()), "m")
    ep = execute_episode(seed, make_task(), env, runtime)
    assert ep.reward == 0.0
    last = ep.trajectory.steps[-1]
    assert last.observation.outcome_flags == {OutcomeFlag.EXEC_ERROR}
    assert last.acting_module is P


def test_model_runtime_budget_is_a_runtime_failure(env, seed):
    runtime = ModelRuntime(Gateway(Cassette(), _Scripted(["x" * 50])), "m", max_output_chars=10)
    with pytest.raises(RuntimeFailure):
        from conftest import make_task as mk
        from evoloop.rollout import StageContext

        task = mk()
        runtime.run_stage("spec", StageContext(task, 0, P, (), env.tools, env.tools[0]))


def test_model_runtime_step_cap(env, seed, fake_llm):
    task = make_task(subgoals=3)
    runtime = ModelRuntime(Gateway(Cassette(), fake_llm), "m", max_steps=5)
    ep = execute_episode(seed, task, env, runtime)
    assert len(ep.trajectory) == 5
    assert ep.trajectory.steps[-1].action.kind is ActionKind.FINISH
    assert ep.final_answer == "" and ep.reward == 4 / 12


def test_model_runtime_full_episode(env, seed, fake_llm):
    task = make_task(subgoals=2)
    runtime = ModelRuntime(Gateway(Cassette(), fake_llm), "m")
    ep = execute_episode(seed, task, env, runtime)
    assert ep.reward == 1.0 and fake_llm.calls == 8
    call = ep.trajectory.steps[2]
    assert call.action.arguments == {"query": "x"}
