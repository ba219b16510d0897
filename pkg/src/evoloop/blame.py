"""Turn an episode into module-wise blame scores and one mutation target."""

from __future__ import annotations

import logging
import math
import random
import re
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Protocol, Sequence

from .environment import OutcomeFlag, TaskInstance
from .errors import (
    BlamerOutputUnparseable,
    EmptyBatch,
    EmptyTrajectory,
    EvoloopError,
    MissingScore,
    MissingSection,
    NoFailureEvidence,
    NonNumericScore,
    PerfectEpisode,
    ScoreClamped,
)
from .gateway import Gateway, chat, render_template
from .policy import PIPELINE, ModuleKind
from .rollout import EpisodeRecord, Trajectory

logger = logging.getLogger(__name__)


class DiagnosticKind(Enum):
    TOOL_CHOICE_OUTCOME = "TOOL_CHOICE_OUTCOME"
    ARGUMENT_VALIDITY = "ARGUMENT_VALIDITY"
    EXECUTION_OUTCOME = "EXECUTION_OUTCOME"
    SYNTHESIS_GROUNDING = "SYNTHESIS_GROUNDING"


class Verdict(Enum):
    PASS = "PASS"
    FAIL = "FAIL"


@dataclass(frozen=True)
class DiagnosticEvent:
    step_index: int
    module: ModuleKind
    kind: DiagnosticKind
    verdict: Verdict
    detail: str = ""

    def render(self) -> str:
        return f"step {self.step_index} {self.module.value} {self.kind.value} {self.verdict.value}: {self.detail}"


# kind reported for a passing stage of each module
_PASS_KIND = {
    ModuleKind.PLANNER: DiagnosticKind.EXECUTION_OUTCOME,
    ModuleKind.SELECTOR: DiagnosticKind.TOOL_CHOICE_OUTCOME,
    ModuleKind.CALLER: DiagnosticKind.ARGUMENT_VALIDITY,
    ModuleKind.SYNTHESIZER: DiagnosticKind.SYNTHESIS_GROUNDING,
}

# precedence when a step carries several failure flags
_FLAG_PRECEDENCE = (
    OutcomeFlag.EXEC_ERROR,
    OutcomeFlag.WRONG_TOOL,
    OutcomeFlag.SCHEMA_VIOLATION,
    OutcomeFlag.UNGROUNDED,
    OutcomeFlag.EMPTY,
)


def _classify(flag: OutcomeFlag, acting: ModuleKind) -> tuple[ModuleKind, DiagnosticKind]:
    if flag is OutcomeFlag.WRONG_TOOL:
        return ModuleKind.SELECTOR, DiagnosticKind.TOOL_CHOICE_OUTCOME
    if flag is OutcomeFlag.SCHEMA_VIOLATION:
        return ModuleKind.CALLER, DiagnosticKind.ARGUMENT_VALIDITY
    if flag is OutcomeFlag.UNGROUNDED:
        return ModuleKind.SYNTHESIZER, DiagnosticKind.SYNTHESIS_GROUNDING
    # EXEC_ERROR and EMPTY belong to whichever module was acting
    return acting, DiagnosticKind.EXECUTION_OUTCOME


def extract_diagnostics(trajectory: Trajectory) -> list[DiagnosticEvent]:
    """One event per stage step, in step order."""
    if not trajectory.steps:
        raise EmptyTrajectory("trajectory has no steps")
    events = []
    for step in trajectory.steps:
        obs = step.observation
        if obs is None:
            continue
        if obs.ok:
            events.append(DiagnosticEvent(step.index, step.acting_module,
                                          _PASS_KIND[step.acting_module], Verdict.PASS, obs.payload))
            continue
        flag = next(f for f in _FLAG_PRECEDENCE if f in obs.outcome_flags)
        module, kind = _classify(flag, step.acting_module)
        events.append(DiagnosticEvent(step.index, module, kind, Verdict.FAIL,
                                      f"{flag.value}: {obs.payload}"))
    return events


def first_failure(diagnostics: Sequence[DiagnosticEvent]) -> DiagnosticEvent | None:
    return next((e for e in diagnostics if e.verdict is Verdict.FAIL), None)


def select_target(scores: Mapping[ModuleKind, float]) -> ModuleKind:
    """Argmax with ties going to the earliest pipeline stage."""
    best = max(scores[k] for k in PIPELINE)
    return next(k for k in PIPELINE if scores[k] == best)


@dataclass(frozen=True)
class BlameReport:
    scores: Mapping[ModuleKind, float]
    target: ModuleKind
    evidence: tuple[str, ...] = ()
    diagnosis: str = ""
    source: str = "oracle"
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        missing = [k.value for k in PIPELINE if k not in self.scores]
        if missing:
            raise ValueError(f"blame report lacks scores for {missing}")
        for k in PIPELINE:
            if not 0.0 <= self.scores[k] <= 1.0:
                raise ValueError(f"score for {k.value} outside [0, 1]")
        if any(self.scores[k] > self.scores[self.target] for k in PIPELINE):
            raise ValueError("blame target does not attain the maximum score")
        object.__setattr__(self, "scores", {k: float(self.scores[k]) for k in PIPELINE})
        object.__setattr__(self, "evidence", tuple(self.evidence))

    def to_dict(self) -> dict:
        return {
            "scores": {k.value: v for k, v in self.scores.items()},
            "target": self.target.value,
            "evidence": list(self.evidence),
            "diagnosis": self.diagnosis,
            "source": self.source,
            "warnings": list(self.warnings),
        }


def one_hot(target: ModuleKind) -> dict[ModuleKind, float]:
    return {k: 1.0 if k is target else 0.0 for k in PIPELINE}


class Blamer(Protocol):
    def blame(self, episode: EpisodeRecord, diagnostics: Sequence[DiagnosticEvent]) -> BlameReport: ...


class OracleBlamer:
    """Blames the module of the earliest failing diagnostic."""

    def blame(self, episode, diagnostics):
        event = first_failure(diagnostics)
        if event is None:
            raise NoFailureEvidence(f"episode {episode.task_id} has reward {episode.reward} but no FAIL event")
        return BlameReport(
            scores=one_hot(event.module),
            target=event.module,
            evidence=(event.render(),),
            diagnosis=f"The {event.module.value} failed first at step {event.step_index}.",
        )


class RandomBlamer:
    """Uniformly random target; the ablation baseline for blame targeting."""

    def __init__(self, seed: int = 0):
        self.rng = random.Random(seed)

    def blame(self, episode, diagnostics):
        target = PIPELINE[self.rng.randrange(len(PIPELINE))]
        return BlameReport(one_hot(target), target, (), f"Randomly chose {target.value}.", source="random")


@dataclass
class BlamerOutput:
    scores: dict[ModuleKind, float]
    evidence: list[str]
    diagnosis: str
    raw_scores: dict[ModuleKind, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def target(self) -> ModuleKind:
        return select_target(self.raw_scores or self.scores)


_BLAMER_SECTIONS = (
    ("scores", re.compile(r"^[ \t]*1[ \t]*[.)][ \t]*Scores\b[ \t:]*", re.I | re.M)),
    ("evidence", re.compile(r"^[ \t]*2[ \t]*[.)][ \t]*Evidence\b[ \t:]*", re.I | re.M)),
    ("diagnosis", re.compile(r"^[ \t]*3[ \t]*[.)][ \t]*One[- ]sentence diagnosis\b[ \t:]*", re.I | re.M)),
)
_SCORE = re.compile(r"\b(planner|selector|caller|synthesizer)\b[ \t]*[:=]?[ \t]*([^\s,;]+)", re.I)


def split_sections(text: str, patterns) -> dict[str, str]:
    """Locate numbered headers and return the text under each one."""
    found = []
    for name, pattern in patterns:
        match = pattern.search(text)
        if match is None:
            raise MissingSection(f"section '{name}' not found")
        found.append((match.start(), match.end(), name))
    found.sort()
    sections = {}
    for i, (_, end, name) in enumerate(found):
        stop = found[i + 1][0] if i + 1 < len(found) else len(text)
        sections[name] = text[end:stop]
    return sections


def _strip_bullet(line: str) -> str:
    return re.sub(r"^\s*(?:[-*•]|\d+[.)])\s*", "", line).strip()


def parse_blamer_output(text: str) -> BlamerOutput:
    sections = split_sections(text, _BLAMER_SECTIONS)
    raw: dict[ModuleKind, float] = {}
    for name, value in _SCORE.findall(sections["scores"]):
        kind = ModuleKind.parse(name)
        if kind in raw:
            continue
        try:
            number = float(value.rstrip("."))
        except ValueError:
            raise NonNumericScore(f"score for {kind.value} is not a number: {value!r}") from None
        if not math.isfinite(number):
            raise NonNumericScore(f"score for {kind.value} is not finite: {value!r}")
        raw[kind] = number
    missing = [k.value for k in PIPELINE if k not in raw]
    if missing:
        raise MissingScore(f"no score for {', '.join(missing)}")
    notes = []
    scores = {}
    for k in PIPELINE:
        scores[k] = min(1.0, max(0.0, raw[k]))
        if scores[k] != raw[k]:
            note = f"{k.value} score {raw[k]} clamped to {scores[k]}"
            notes.append(note)
            warnings.warn(note, ScoreClamped, stacklevel=2)
    evidence = [_strip_bullet(line) for line in sections["evidence"].splitlines()]
    evidence = [line for line in evidence if line]
    diagnosis = " ".join(line.strip() for line in sections["diagnosis"].splitlines() if line.strip())
    if not diagnosis:
        raise MissingSection("section 'diagnosis' is empty")
    return BlamerOutput(scores, evidence, diagnosis, raw, notes)


BLAMER_TEMPLATE = """\
# ROLE
You are a diagnostic judge for a modular tool-using agent.

# GOAL
Given (i) a task, (ii) a full execution trajectory, (iii) structured events for each module in Planner,
Selector, Caller, and Synthesizer extracted from the trajectory, and (iv) an outcome signal
with either 0 (fail) or 1 (success), your task is to assign module-level blame to one of the four modules that is most responsible for the errors or suboptimality in the trajectory.

# ATTRIBUTION CRITERIA
- Planner: missing or incorrect decomposition; incorrect ordering; dropped constraints or lost state.
- Selector: wrong tool choice; missing tool choice when necessary.
- Caller: schema or format violations; wrong parameters; malformed calls.
- Synthesizer: ungrounded final response; contradiction with tool outputs; missing integration of key observations.

# BLAME ASSIGNMENT RULES
- Give each module a score in 0 to 1.
- Blame the most causal module that most directly caused failure or quality loss.
- Use the extracted events for each module first, then confirm with trajectory evidence.
- Prefer the earliest causal mistake. If multi causal, still pick one primary.

# OUTPUT FORMAT
Output plain text using following format:

1. Scores
planner <number>
selector <number>
caller <number>
synthesizer <number>

2. Evidence
Provide evidence for each module. Each line must include information from the extracted events
and a short reason grounded in the trajectory.

3. One sentence diagnosis
Write one sentence explaining why the primary module is blamed.

# TASK
{{task}}

# TRAJECTORY
{{trajectory}}

# MODULE EVENTS
{{events}}

# OUTCOME
{{outcome}}
"""

BLAMER_RETRY = (
    "Your reply could not be parsed ({error}). Answer again using exactly the three sections "
    "'1. Scores' (one line per module: planner, selector, caller, synthesizer, each followed by a number in 0 to 1), "
    "'2. Evidence' and '3. One sentence diagnosis'."
)


def render_trajectory(episode: EpisodeRecord) -> str:
    lines = []
    for step in episode.trajectory.steps:
        action = step.action
        if action.tool is not None:
            desc = f"TOOL_CALL {action.tool} {dict(action.arguments or {})}"
        else:
            desc = f"{action.kind.value} {action.text}"
        obs = ""
        if step.observation is not None:
            flags = ",".join(sorted(f.value for f in step.observation.outcome_flags))
            obs = f" => [{flags}] {step.observation.payload}"
        lines.append(f"{step.index}. ({step.acting_module.value}) {desc}{obs}")
    lines.append(f"final answer: {episode.final_answer!r}")
    return "\n".join(lines)


def render_blamer_prompt(episode: EpisodeRecord, diagnostics: Sequence[DiagnosticEvent],
                         task: TaskInstance | None = None) -> str:
    task_text = task.instruction if task is not None else episode.task_id
    outcome = 1 if episode.reward >= 1.0 else 0
    return render_template(BLAMER_TEMPLATE, {
        "task": task_text,
        "trajectory": render_trajectory(episode),
        "events": "\n".join(e.render() for e in diagnostics) or "(none)",
        "outcome": f"{outcome} (reward {episode.reward:.4f})",
    })


class ModelBlamer:
    """Blamer backed by a chat model, retried once on unparseable output."""

    def __init__(self, gateway: Gateway, model_id: str, tasks: Mapping[str, TaskInstance] | None = None,
                 temperature: float = 0.0):
        self.gateway = gateway
        self.model_id = model_id
        self.tasks = dict(tasks or {})
        self.temperature = temperature

    def blame(self, episode, diagnostics):
        prompt = render_blamer_prompt(episode, diagnostics, self.tasks.get(episode.task_id))
        request = chat(self.model_id, None, prompt, self.temperature)
        reply = self.gateway.complete(request)
        try:
            parsed = parse_blamer_output(reply)
        except EvoloopError as first:
            logger.info("blamer reply unparseable (%s); retrying", first)
            retry = chat(self.model_id, None, prompt, self.temperature, history=[
                {"role": "assistant", "content": reply},
                {"role": "user", "content": BLAMER_RETRY.format(error=first)},
            ])
            try:
                parsed = parse_blamer_output(self.gateway.complete(retry))
            except EvoloopError as second:
                raise BlamerOutputUnparseable(str(second)) from second
        return BlameReport(parsed.scores, parsed.target, tuple(parsed.evidence), parsed.diagnosis,
                           source="model", warnings=tuple(parsed.warnings))


def assign_blame(episode: EpisodeRecord, diagnostics: Sequence[DiagnosticEvent], blamer: Blamer) -> BlameReport:
    """Blame an imperfect episode.

    If a model blamer stays unparseable after its retry, the earliest FAIL
    diagnostic decides the target and the report is marked as a fallback.
    """
    if episode.reward >= 1.0:
        raise PerfectEpisode(f"episode {episode.task_id} is perfect; nothing to blame")
    try:
        return blamer.blame(episode, diagnostics)
    except BlamerOutputUnparseable as exc:
        event = first_failure(diagnostics)
        if event is None:
            raise
        logger.warning("blamer fallback to heuristic target %s: %s", event.module.value, exc)
        return BlameReport(one_hot(event.module), event.module, (event.render(),),
                           f"Heuristic fallback after unparseable blamer output: {exc}",
                           source="fallback")


def select_blame_episode(episodes: Sequence[EpisodeRecord]) -> EpisodeRecord | None:
    """Lowest-reward episode (earliest on ties), or None if every reward is 1."""
    if not episodes:
        raise EmptyBatch("no episodes to choose from")
    worst = min(range(len(episodes)), key=lambda i: (episodes[i].reward, i))
    if episodes[worst].reward >= 1.0:
        return None
    return episodes[worst]
