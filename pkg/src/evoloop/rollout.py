"""Execute the plan -> select -> call -> synthesize pipeline on tasks."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping, Protocol, Sequence

from .environment import (
    Observation,
    OutcomeFlag,
    ScriptedEnvironment,
    TaskInstance,
    ToolDef,
)
from .errors import BudgetExceeded, EmptyBatch, RuntimeFailure, TransportError
from .gateway import Gateway, chat
from .policy import PIPELINE, ModuleKind, PolicyGenome

logger = logging.getLogger(__name__)

DEFAULT_MAX_STEPS = 25


class ActionKind(Enum):
    REASON = "REASON"
    TOOL_CALL = "TOOL_CALL"
    FINISH = "FINISH"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    text: str = ""
    tool: str | None = None
    arguments: Mapping[str, Any] | None = None

    @classmethod
    def reason(cls, text: str) -> "Action":
        return cls(ActionKind.REASON, text)

    @classmethod
    def tool_call(cls, tool: str, arguments: Mapping[str, Any]) -> "Action":
        return cls(ActionKind.TOOL_CALL, tool=tool, arguments=dict(arguments))

    @classmethod
    def finish(cls, answer: str) -> "Action":
        return cls(ActionKind.FINISH, answer)

    def to_dict(self) -> dict[str, Any]:
        if self.kind is ActionKind.TOOL_CALL:
            return {"kind": self.kind.value, "tool": self.tool, "arguments": dict(self.arguments or {})}
        key = "answer" if self.kind is ActionKind.FINISH else "text"
        return {"kind": self.kind.value, key: self.text}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Action":
        kind = ActionKind(data["kind"])
        if kind is ActionKind.TOOL_CALL:
            return cls.tool_call(data["tool"], data.get("arguments") or {})
        if kind is ActionKind.FINISH:
            return cls.finish(data.get("answer", ""))
        return cls.reason(data.get("text", ""))


@dataclass(frozen=True)
class Step:
    """One (state, action, observation) triple.

    Tool calls always carry an observation and FINISH never does. A REASON
    step carries one when it is a stage check judged by the environment.
    """

    index: int
    state_summary: str
    action: Action
    observation: Observation | None
    acting_module: ModuleKind

    def __post_init__(self):
        if self.action.kind is ActionKind.TOOL_CALL and self.observation is None:
            raise ValueError("a TOOL_CALL step needs an observation")
        if self.action.kind is ActionKind.FINISH and self.observation is not None:
            raise ValueError("a FINISH step cannot carry an observation")

    @property
    def is_stage(self) -> bool:
        return self.observation is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "acting_module": self.acting_module.value,
            "state_summary": self.state_summary,
            "action": self.action.to_dict(),
            "observation": self.observation.to_dict() if self.observation else None,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Step":
        obs = data.get("observation")
        return cls(
            index=int(data["index"]),
            state_summary=data.get("state_summary", ""),
            action=Action.from_dict(data["action"]),
            observation=Observation.from_dict(obs) if obs else None,
            acting_module=ModuleKind.parse(data["acting_module"]),
        )


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[Step, ...]

    def __post_init__(self):
        steps = tuple(self.steps)
        object.__setattr__(self, "steps", steps)
        for i, step in enumerate(steps):
            if step.index != i:
                raise ValueError(f"step {i} has index {step.index}")
        finishes = [i for i, s in enumerate(steps) if s.action.kind is ActionKind.FINISH]
        if finishes and finishes != [len(steps) - 1]:
            raise ValueError("FINISH may appear only once, as the final step")

    @property
    def length(self) -> int:
        return len(self.steps)

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)


@dataclass(frozen=True)
class EpisodeRecord:
    task_id: str
    genome_id: str
    trajectory: Trajectory
    final_answer: str
    reward: float
    stages_passed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "genome_id": self.genome_id,
            "reward": self.reward,
            "final_answer": self.final_answer,
            "stages_passed": self.stages_passed,
            "steps": [s.to_dict() for s in self.trajectory.steps],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EpisodeRecord":
        return cls(
            task_id=data["task_id"],
            genome_id=data["genome_id"],
            trajectory=Trajectory(tuple(Step.from_dict(s) for s in data["steps"])),
            final_answer=data.get("final_answer", ""),
            reward=float(data["reward"]),
            stages_passed=int(data.get("stages_passed", 0)),
        )


@dataclass(frozen=True)
class StageContext:
    task: TaskInstance
    subgoal: int
    module: ModuleKind
    history: tuple[Step, ...]
    tools: tuple[ToolDef, ...]
    tool: ToolDef


class ModuleRuntime(Protocol):
    # None means the scripted cap of one step per stage plus FINISH
    max_steps: int | None

    def run_stage(self, spec_text: str, ctx: StageContext) -> Action: ...


class ScriptedRuntime:
    """Deterministic stage outputs; pass/fail is left to the environment."""

    max_steps: int | None = None

    def run_stage(self, spec_text: str, ctx: StageContext) -> Action:
        task, g = ctx.task, ctx.subgoal
        if ctx.module is ModuleKind.PLANNER:
            return Action.reason(f"subgoal {g + 1}/{task.num_subgoals}: {task.instruction}")
        if ctx.module is ModuleKind.SELECTOR:
            return Action.reason(f"use {ctx.tool.name}")
        if ctx.module is ModuleKind.CALLER:
            return Action.tool_call(ctx.tool.name, ctx.tool.example_arguments(f"{task.id}-{g}"))
        return Action.reason(_draft_from_history(ctx.history))


def _draft_from_history(history: Sequence[Step]) -> str:
    for step in reversed(history):
        if step.action.kind is ActionKind.TOOL_CALL and step.observation is not None:
            payload = step.observation.payload
            return payload.split("returned: ", 1)[-1]
    return ""


_JSON_OBJECT = re.compile(r"\{.*\}", re.DOTALL)


class ModelRuntime:
    """Runs each stage as one chat call with the module spec as system message."""

    def __init__(
        self,
        gateway: Gateway,
        model_id: str,
        temperature: float = 0.0,
        max_steps: int = DEFAULT_MAX_STEPS,
        max_output_chars: int = 20000,
    ):
        self.gateway = gateway
        self.model_id = model_id
        self.temperature = temperature
        self.max_steps = max_steps
        self.max_output_chars = max_output_chars

    def render_context(self, ctx: StageContext) -> str:
        lines = [
            f"Task: {ctx.task.instruction}",
            f"Current subgoal: {ctx.subgoal + 1} of {ctx.task.num_subgoals}",
            f"Stage: {ctx.module.value}",
        ]
        if ctx.module in (ModuleKind.SELECTOR, ModuleKind.CALLER):
            lines.append("Tools:")
            for tool in ctx.tools:
                lines.append(f"- {tool.name}: {tool.documentation} args={json.dumps(tool.to_dict()['argument_schema'], sort_keys=True)}")
        if ctx.module is ModuleKind.CALLER:
            lines.append(f"Selected tool: {ctx.tool.name}. Reply with a JSON object of arguments.")
        if ctx.history:
            lines.append("History:")
            for step in ctx.history:
                obs = f" -> {step.observation.payload}" if step.observation else ""
                lines.append(f"[{step.index}] {step.acting_module.value}: {json.dumps(step.action.to_dict(), sort_keys=True)}{obs}")
        return "\n".join(lines)

    def run_stage(self, spec_text: str, ctx: StageContext) -> Action:
        request = chat(self.model_id, spec_text, self.render_context(ctx),
                       self.temperature, self.max_output_chars)
        try:
            reply = self.gateway.complete(request)
        except (TransportError, BudgetExceeded) as exc:
            raise RuntimeFailure(f"{type(exc).__name__}: {exc}") from exc
        if ctx.module is ModuleKind.CALLER:
            match = _JSON_OBJECT.search(reply)
            arguments: dict[str, Any] = {}
            if match:
                try:
                    parsed = json.loads(match.group(0))
                    if isinstance(parsed, dict):
                        arguments = parsed
                except json.JSONDecodeError:
                    pass
            return Action.tool_call(ctx.tool.name, arguments)
        return Action.reason(reply.strip())


def execute_episode(
    genome: PolicyGenome,
    task: TaskInstance,
    env: ScriptedEnvironment,
    runtime: ModuleRuntime,
) -> EpisodeRecord:
    """Roll out one task; the trajectory stops at the first failing stage."""
    cap = task.num_stages + 1 if runtime.max_steps is None else runtime.max_steps
    steps: list[Step] = []
    passed = 0
    draft = ""
    complete = True
    for g in range(task.num_subgoals):
        for module in PIPELINE:
            if len(steps) >= cap - 1:
                steps.append(Step(len(steps), "step budget exhausted", Action.finish(""),
                                  None, ModuleKind.SYNTHESIZER))
                return _finish(genome, task, env, steps, "", passed)
            idx = len(steps)
            summary = f"subgoal {g} {module.value}; {passed} stage(s) passed"
            ctx = StageContext(task, g, module, tuple(steps), env.tools, env.tool_for(task, g))
            try:
                action = runtime.run_stage(genome.text(module), ctx)
            except RuntimeFailure as exc:
                logger.warning("runtime failure on %s stage %s of %s: %s", module.value, g, task.id, exc)
                obs = Observation(idx, str(exc), frozenset({OutcomeFlag.EXEC_ERROR}))
                steps.append(Step(idx, summary, Action.reason(f"runtime failure: {exc}"), obs, module))
                return EpisodeRecord(task.id, genome.id, Trajectory(tuple(steps)), "", 0.0, 0)
            obs = env.observe(task, g, module, genome.text(module), idx)
            steps.append(Step(idx, summary, action, obs, module))
            if not obs.ok:
                complete = False
                break
            passed += 1
            if module is ModuleKind.SYNTHESIZER:
                draft = action.text
        if not complete:
            break
    answer = ""
    if complete:
        answer = draft
        steps.append(Step(len(steps), "all stages passed", Action.finish(answer), None,
                          ModuleKind.SYNTHESIZER))
    return _finish(genome, task, env, steps, answer, passed)


def _finish(genome, task, env, steps, answer, passed) -> EpisodeRecord:
    reward = env.score(task, answer, passed)
    return EpisodeRecord(task.id, genome.id, Trajectory(tuple(steps)), answer, reward, passed)


def evaluate_batch(
    genome: PolicyGenome,
    tasks: Sequence[TaskInstance],
    env: ScriptedEnvironment,
    runtime: ModuleRuntime,
) -> tuple[float, list[EpisodeRecord]]:
    if not tasks:
        raise EmptyBatch("cannot evaluate an empty batch")
    episodes = [execute_episode(genome, task, env, runtime) for task in tasks]
    return mean_reward(episodes), episodes


def mean_reward(episodes: Sequence[EpisodeRecord]) -> float:
    if not episodes:
        raise EmptyBatch("no episodes")
    return sum(e.reward for e in episodes) / len(episodes)
