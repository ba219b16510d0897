"""Tool environment contract and the deterministic scripted environment.

The scripted environment decides every stage check from the RULE tags in the
acting module's spec text, so a rollout is a pure function of
(genome texts, task).
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping

from .errors import EmptySplit, OutOfRangeStageCount, OverlappingSplits, ParseError
from .policy import PIPELINE, ModuleKind

STAGES_PER_SUBGOAL = len(PIPELINE)

_RULE_LINE = re.compile(r"RULE:\s*(\S+)")


class OutcomeFlag(Enum):
    OK = "OK"
    EMPTY = "EMPTY"
    SCHEMA_VIOLATION = "SCHEMA_VIOLATION"
    EXEC_ERROR = "EXEC_ERROR"
    WRONG_TOOL = "WRONG_TOOL"
    UNGROUNDED = "UNGROUNDED"


# flag recorded when a module's stage check fails
FAILURE_FLAG = {
    ModuleKind.PLANNER: OutcomeFlag.EMPTY,
    ModuleKind.SELECTOR: OutcomeFlag.WRONG_TOOL,
    ModuleKind.CALLER: OutcomeFlag.SCHEMA_VIOLATION,
    ModuleKind.SYNTHESIZER: OutcomeFlag.UNGROUNDED,
}


@dataclass(frozen=True)
class Observation:
    step_index: int
    payload: str
    outcome_flags: frozenset[OutcomeFlag]

    def __post_init__(self):
        flags = frozenset(self.outcome_flags)
        object.__setattr__(self, "outcome_flags", flags)
        if OutcomeFlag.OK in flags and len(flags) > 1:
            raise ValueError("OK cannot be combined with another outcome flag")
        if not flags:
            raise ValueError("an observation needs at least one outcome flag")

    @property
    def ok(self) -> bool:
        return OutcomeFlag.OK in self.outcome_flags

    def to_dict(self) -> dict[str, Any]:
        return {
            "step_index": self.step_index,
            "payload": self.payload,
            "outcome_flags": sorted(f.value for f in self.outcome_flags),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Observation":
        return cls(
            step_index=int(data["step_index"]),
            payload=data["payload"],
            outcome_flags=frozenset(OutcomeFlag(f) for f in data["outcome_flags"]),
        )


@dataclass(frozen=True)
class ToolDef:
    """A tool with a flat argument schema.

    Schema values are ``"string"``, ``"number"``, ``"boolean"`` or a tuple of
    allowed enum values.
    """

    name: str
    argument_schema: Mapping[str, str | tuple[str, ...]]
    documentation: str = ""

    def validate(self, arguments: Mapping[str, Any]) -> list[str]:
        problems = []
        for param, kind in self.argument_schema.items():
            if param not in arguments:
                problems.append(f"missing argument {param}")
                continue
            value = arguments[param]
            if isinstance(kind, tuple):
                if value not in kind:
                    problems.append(f"{param}={value!r} not in {list(kind)}")
            elif kind == "string" and not isinstance(value, str):
                problems.append(f"{param} must be a string")
            elif kind == "boolean" and not isinstance(value, bool):
                problems.append(f"{param} must be a boolean")
            elif kind == "number" and (
                isinstance(value, bool) or not isinstance(value, (int, float))
            ):
                problems.append(f"{param} must be a number")
        for param in arguments:
            if param not in self.argument_schema:
                problems.append(f"unexpected argument {param}")
        return problems

    def example_arguments(self, seed: str) -> dict[str, Any]:
        args: dict[str, Any] = {}
        for i, (param, kind) in enumerate(self.argument_schema.items()):
            if isinstance(kind, tuple):
                args[param] = kind[0]
            elif kind == "number":
                args[param] = i + 1
            elif kind == "boolean":
                args[param] = True
            else:
                args[param] = f"{seed}-{param}"
        return args

    def to_dict(self) -> dict[str, Any]:
        schema = {
            p: {"enum": list(k)} if isinstance(k, tuple) else k
            for p, k in self.argument_schema.items()
        }
        return {"name": self.name, "argument_schema": schema, "documentation": self.documentation}


DEFAULT_TOOLS: tuple[ToolDef, ...] = (
    ToolDef(
        "search_catalog",
        {"query": "string", "limit": "number"},
        "Full-text search over the catalog; returns matching record ids.",
    ),
    ToolDef(
        "get_record",
        {"record_id": "string", "expand": "boolean"},
        "Fetch one record by id.",
    ),
    ToolDef(
        "convert_units",
        {"value": "number", "unit": ("metric", "imperial")},
        "Convert a numeric value between unit systems.",
    ),
)


SkillMap = Mapping[tuple[int, ModuleKind], frozenset[str]]


@dataclass(frozen=True)
class TaskInstance:
    """One task. ``required_skills`` (and the optional ``forbidden_skills``)
    map a (subgoal, module) stage to skill tags."""

    id: str
    instruction: str
    required_skills: SkillMap
    num_subgoals: int
    gold_answer: str
    forbidden_skills: SkillMap = field(default_factory=dict)

    def __post_init__(self):
        if self.num_subgoals < 1:
            raise ValueError(f"task {self.id}: num_subgoals must be positive")
        for name in ("required_skills", "forbidden_skills"):
            skills = getattr(self, name)
            for (g, m), tags in skills.items():
                if not 0 <= g < self.num_subgoals:
                    raise ValueError(f"task {self.id}: subgoal {g} out of range")
                if not isinstance(m, ModuleKind):
                    raise ValueError(f"task {self.id}: bad module {m!r}")
            frozen = MappingProxyType({k: frozenset(v) for k, v in skills.items()})
            object.__setattr__(self, name, frozen)
        for stage, tags in self.forbidden_skills.items():
            clash = tags & self.required_skills.get(stage, frozenset())
            if clash:
                raise ValueError(f"task {self.id}: tags both required and forbidden: {sorted(clash)}")

    @property
    def num_stages(self) -> int:
        return STAGES_PER_SUBGOAL * self.num_subgoals

    def required(self, subgoal: int, module: ModuleKind) -> frozenset[str]:
        return self.required_skills.get((subgoal, module), frozenset())

    def forbidden(self, subgoal: int, module: ModuleKind) -> frozenset[str]:
        return self.forbidden_skills.get((subgoal, module), frozenset())

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "id": self.id,
            "instruction": self.instruction,
            "num_subgoals": self.num_subgoals,
            "gold_answer": self.gold_answer,
            "required_skills": _skills_to_list(self.required_skills),
        }
        if self.forbidden_skills:
            data["forbidden_skills"] = _skills_to_list(self.forbidden_skills)
        return data


def _skills_to_list(skills: SkillMap) -> list[dict[str, Any]]:
    return [
        {"subgoal": g, "module": m.value, "tags": sorted(tags)}
        for (g, m), tags in sorted(skills.items(), key=lambda kv: (kv[0][0], kv[0][1].rank))
    ]


def _parse_skills(task_id: str, entries: Any) -> dict[tuple[int, ModuleKind], frozenset[str]]:
    if entries is None:
        return {}
    if not isinstance(entries, list):
        raise ParseError(f"task {task_id}: skill list must be a JSON array")
    skills: dict[tuple[int, ModuleKind], set[str]] = {}
    for entry in entries:
        try:
            g = int(entry["subgoal"])
            m = ModuleKind.parse(entry["module"])
            tags = entry["tags"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"task {task_id}: malformed skill entry {entry!r}") from exc
        for tag in tags:
            if not isinstance(tag, str) or not tag or any(c.isspace() for c in tag):
                raise ParseError(f"task {task_id}: invalid tag {tag!r}")
        skills.setdefault((g, m), set()).update(tags)
    return {k: frozenset(v) for k, v in skills.items()}


def task_from_dict(data: Mapping[str, Any]) -> TaskInstance:
    try:
        task_id = str(data["id"])
        instruction = str(data["instruction"])
        num_subgoals = int(data["num_subgoals"])
        gold = str(data["gold_answer"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed task entry: {exc}") from exc
    try:
        return TaskInstance(
            id=task_id,
            instruction=instruction,
            required_skills=_parse_skills(task_id, data.get("required_skills")),
            num_subgoals=num_subgoals,
            gold_answer=gold,
            forbidden_skills=_parse_skills(task_id, data.get("forbidden_skills")),
        )
    except ValueError as exc:
        raise ParseError(str(exc)) from exc


def parse_task_suite(data: Any) -> tuple[list[TaskInstance], list[TaskInstance]]:
    if not isinstance(data, dict) or "train" not in data or "selection" not in data:
        raise ParseError('task suite needs top-level "train" and "selection" arrays')
    splits = []
    for name in ("train", "selection"):
        raw = data[name]
        if not isinstance(raw, list):
            raise ParseError(f'"{name}" must be an array')
        tasks = [task_from_dict(t) for t in raw]
        if not tasks:
            raise EmptySplit(f'"{name}" split is empty')
        ids = [t.id for t in tasks]
        if len(set(ids)) != len(ids):
            raise ParseError(f'duplicate task id in "{name}"')
        splits.append(tasks)
    train, selection = splits
    overlap = {t.id for t in train} & {t.id for t in selection}
    if overlap:
        raise OverlappingSplits(f"ids in both splits: {sorted(overlap)}")
    return train, selection


def load_task_suite(source: str | Path) -> tuple[list[TaskInstance], list[TaskInstance]]:
    path = Path(source)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ParseError(f"task suite not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return parse_task_suite(data)


def load_tool_suite(source: str | Path) -> tuple[ToolDef, ...]:
    path = Path(source)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(data, list):
        raise ParseError("tool suite must be a JSON array")
    tools = []
    for entry in data:
        try:
            schema = {}
            for param, kind in entry["argument_schema"].items():
                if isinstance(kind, dict) and "enum" in kind:
                    schema[param] = tuple(str(v) for v in kind["enum"])
                elif kind in ("string", "number", "boolean"):
                    schema[param] = kind
                else:
                    raise ParseError(f"tool {entry['name']}: unknown value kind {kind!r}")
            tools.append(ToolDef(str(entry["name"]), schema, str(entry.get("documentation", ""))))
        except (KeyError, TypeError, AttributeError) as exc:
            raise ParseError(f"malformed tool entry {entry!r}") from exc
    names = [t.name for t in tools]
    if len(set(names)) != len(names):
        raise ParseError("duplicate tool name")
    return tuple(tools)


def scripted_tags(spec_text: str) -> frozenset[str]:
    """Tags declared by lines of the form ``RULE: <tag>``."""
    tags = set()
    for line in spec_text.splitlines():
        match = _RULE_LINE.fullmatch(line.strip())
        if match:
            tags.add(match.group(1))
    return frozenset(tags)


def score(task: TaskInstance, final_answer: str, stages_passed: int) -> float:
    """Graded prefix reward; full credit also needs the gold answer in the reply."""
    total = task.num_stages
    if not 0 <= stages_passed <= total:
        raise OutOfRangeStageCount(f"stages_passed={stages_passed} outside [0, {total}]")
    if stages_passed == total and task.gold_answer not in final_answer:
        return (total - 1) / total
    return stages_passed / total


@dataclass(frozen=True)
class StageVerdict:
    passed: bool
    missing: tuple[str, ...]
    conflicting: tuple[str, ...]


class ScriptedEnvironment:
    """Stateless environment whose stage checks read RULE tags from spec text."""

    def __init__(self, tools: Iterable[ToolDef] = DEFAULT_TOOLS):
        self.tools = tuple(tools)
        if not self.tools:
            raise ValueError("at least one tool is required")

    def tool_for(self, task: TaskInstance, subgoal: int) -> ToolDef:
        key = f"{task.id}:{subgoal}".encode("utf-8")
        return self.tools[zlib.crc32(key) % len(self.tools)]

    def check_stage(
        self, task: TaskInstance, subgoal: int, module: ModuleKind, spec_text: str
    ) -> StageVerdict:
        tags = scripted_tags(spec_text)
        missing = tuple(sorted(task.required(subgoal, module) - tags))
        conflicting = tuple(sorted(task.forbidden(subgoal, module) & tags))
        return StageVerdict(not missing and not conflicting, missing, conflicting)

    def tool_result(self, task: TaskInstance, subgoal: int) -> str:
        if subgoal == task.num_subgoals - 1:
            return task.gold_answer
        return f"partial result {subgoal + 1}/{task.num_subgoals}"

    def observe(
        self,
        task: TaskInstance,
        subgoal: int,
        module: ModuleKind,
        spec_text: str,
        step_index: int,
    ) -> Observation:
        verdict = self.check_stage(task, subgoal, module, spec_text)
        if verdict.passed:
            if module is ModuleKind.CALLER:
                tool = self.tool_for(task, subgoal)
                payload = f"{tool.name} returned: {self.tool_result(task, subgoal)}"
            else:
                payload = f"{module.value} stage {subgoal} ok"
            return Observation(step_index, payload, frozenset({OutcomeFlag.OK}))
        parts = []
        if verdict.missing:
            parts.append("missing capability: " + ", ".join(verdict.missing))
        if verdict.conflicting:
            parts.append("conflicting capability: " + ", ".join(verdict.conflicting))
        payload = f"{module.value} stage {subgoal} failed; " + "; ".join(parts)
        return Observation(step_index, payload, frozenset({FAILURE_FLAG[module]}))

    def score(self, task: TaskInstance, final_answer: str, stages_passed: int) -> float:
        return score(task, final_answer, stages_passed)
