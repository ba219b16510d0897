from __future__ import annotations

import re

import pytest

from evoloop.environment import ScriptedEnvironment, TaskInstance
from evoloop.gateway import ChatRequest
from evoloop.policy import ModuleKind, new_seed_genome
from evoloop.rollout import ScriptedRuntime
from evoloop.suites import CONVERGENCE, builtin_suite

P, S, C, Y = ModuleKind.PLANNER, ModuleKind.SELECTOR, ModuleKind.CALLER, ModuleKind.SYNTHESIZER


def make_task(tid="t", subgoals=1, required=None, forbidden=None, gold="GOLD-42"):
    return TaskInstance(
        id=tid,
        instruction=f"do {tid}",
        required_skills={k: frozenset(v) for k, v in (required or {}).items()},
        num_subgoals=subgoals,
        gold_answer=gold,
        forbidden_skills={k: frozenset(v) for k, v in (forbidden or {}).items()},
    )


def with_rules(genome, rules):
    """Seed genome with extra RULE lines per module."""
    from evoloop.policy import PIPELINE

    texts = {k: genome.text(k) + "".join(f"\nRULE: {t}" for t in rules.get(k, ())) for k in PIPELINE}
    return new_seed_genome(texts)


@pytest.fixture
def env():
    return ScriptedEnvironment()


@pytest.fixture
def runtime():
    return ScriptedRuntime()


@pytest.fixture
def seed():
    return new_seed_genome()


@pytest.fixture(scope="session")
def convergence():
    return builtin_suite(CONVERGENCE)


_FIRST_FAIL = re.compile(r"^step \d+ (planner|selector|caller|synthesizer) \S+ FAIL", re.M)
_MISSING = re.compile(r"missing capability: ([^;,\s]+)")


class FakeLLM:
    """Deterministic stand-in for a chat endpoint that counts calls.

    Blamer prompts get the first FAIL module, edit prompts get the current
    spec plus the missing RULE, and stage prompts echo the last tool output.
    """

    def __init__(self):
        self.calls = 0

    def send(self, request: ChatRequest) -> str:
        self.calls += 1
        user = [m for m in request.messages if m["role"] == "user"][0]["content"]
        if "# MODULE EVENTS" in user:
            events = user.split("# MODULE EVENTS", 1)[1]
            match = _FIRST_FAIL.search(events)
            blamed = match.group(1) if match else "synthesizer"
            scores = "\n".join(f"{k.value} {1.0 if k.value == blamed else 0.0}" for k in ModuleKind)
            return (f"1. Scores\n{scores}\n\n2. Evidence\n- {blamed}: first failing event\n\n"
                    f"3. One sentence diagnosis\nThe {blamed} failed first.\n")
        if "# TARGET MODULE" in user:
            target = user.split("# TARGET MODULE\n", 1)[1].split("\n", 1)[0].strip()
            spec = user.split("# CURRENT SPECIFICATION\n", 1)[1].split("\n\n# FAILURE EPISODE PACKET", 1)[0]
            packet = user.split("# FAILURE EPISODE PACKET", 1)[1]
            match = _MISSING.search(packet)
            revised = spec + (f"\nRULE: {match.group(1)}" if match else "")
            return (f"1. Target module\n{target}\n\n2. Diagnosed error mode\nA capability was missing.\n\n"
                    f"3. Minimal edit summary\nDeclare it.\n\n4. Revised target module spec\n{revised}\n")
        if "Stage: caller" in user:
            return '{"query": "x"}'
        if "returned: " in user:
            return "Answer: " + user.rsplit("returned: ", 1)[1].splitlines()[0]
        return "ok"


@pytest.fixture
def fake_llm():
    return FakeLLM()
