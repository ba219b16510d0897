"""Feedback-guided edits to the single blamed module."""

from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

from .blame import BlameReport, DiagnosticEvent, Verdict, render_trajectory
from .environment import TaskInstance, scripted_tags
from .errors import (
    EvoloopError,
    MissingSection,
    MutatorOutputUnparseable,
    NoMissingTag,
    TargetMismatch,
    UnknownTarget,
)
from .gateway import Gateway, chat, render_template
from .policy import PIPELINE, ModuleKind, PolicyGenome, with_replaced_module
from .rollout import EpisodeRecord

logger = logging.getLogger(__name__)

MAX_SPEC_CHARS = 8000

_MISSING = re.compile(r"missing capability: ([^;]+)")


@dataclass(frozen=True)
class MutationProposal:
    target: ModuleKind
    error_mode: str
    edit_summary: str
    revised_spec: str
    feedback: str
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "target": self.target.value,
            "error_mode": self.error_mode,
            "edit_summary": self.edit_summary,
            "revised_spec": self.revised_spec,
            "feedback": self.feedback,
            "warnings": list(self.warnings),
        }


class Mutator(Protocol):
    def propose(
        self,
        episode: EpisodeRecord,
        target: ModuleKind,
        genome: PolicyGenome,
        diagnostics: Sequence[DiagnosticEvent],
        blame: BlameReport | None = None,
    ) -> MutationProposal: ...


def _failing_stage(episode: EpisodeRecord, diagnostics: Sequence[DiagnosticEvent]):
    """(subgoal, failing step) of the first FAIL event, or None."""
    for event in diagnostics:
        if event.verdict is Verdict.FAIL:
            step = episode.trajectory.steps[event.step_index]
            # stage steps are laid out four per subgoal from index 0
            return event.step_index // len(PIPELINE), step
    return None


def append_rule(spec_text: str, tag: str) -> str:
    """Add ``RULE: tag``; a spec that already declares the tag is returned unchanged."""
    if tag in scripted_tags(spec_text):
        return spec_text
    return f"{spec_text}\nRULE: {tag}"


class OracleMutator:
    """Adds the first missing tag of the failing (subgoal, target) stage.

    When the target is the module that failed, the tag is read from the
    failure observation. Any other target is checked against the task's
    requirements for that stage.
    """

    def __init__(self, tasks: Mapping[str, TaskInstance]):
        self.tasks = dict(tasks)

    def propose(self, episode, target, genome, diagnostics, blame=None):
        located = _failing_stage(episode, diagnostics)
        if located is None:
            raise NoMissingTag(f"episode {episode.task_id} has no failing stage")
        subgoal, step = located
        tag = None
        if step.acting_module is target and step.observation is not None:
            match = _MISSING.search(step.observation.payload)
            if match:
                tag = match.group(1).split(",")[0].strip()
        if tag is None and step.acting_module is not target:
            task = self.tasks[episode.task_id]
            missing = sorted(task.required(subgoal, target) - scripted_tags(genome.text(target)))
            tag = missing[0] if missing else None
        if tag is None:
            raise NoMissingTag(f"stage ({subgoal}, {target.value}) of {episode.task_id} lacks no tag")
        feedback = f"Stage ({subgoal}, {target.value}) failed; missing capability {tag}."
        return MutationProposal(
            target=target,
            error_mode=feedback,
            edit_summary=f"Declare capability {tag}.",
            revised_spec=append_rule(genome.text(target), tag),
            feedback=feedback,
        )


@dataclass
class MutatorOutput:
    target: ModuleKind
    error_mode: str
    edit_summary: str
    revised_spec: str
    warnings: list[str] = field(default_factory=list)


_MUTATOR_SECTIONS = (
    ("target", re.compile(r"^[ \t]*1[ \t]*[.)][ \t]*Target module\b[ \t:]*", re.I | re.M)),
    ("error_mode", re.compile(r"^[ \t]*2[ \t]*[.)][ \t]*Diagnosed error mode\b[ \t:]*", re.I | re.M)),
    ("edit_summary", re.compile(r"^[ \t]*3[ \t]*[.)][ \t]*Minimal edit summary\b[ \t:]*", re.I | re.M)),
    ("revised_spec", re.compile(r"^[ \t]*4[ \t]*[.)][ \t]*Revised target module spec\b[ \t:]*", re.I | re.M)),
)


def _sequential_sections(text: str) -> dict[str, str]:
    # each header is searched after the previous one so spec text in
    # section 4 cannot shadow an earlier header
    bounds = []
    pos = 0
    for name, pattern in _MUTATOR_SECTIONS:
        match = pattern.search(text, pos)
        if match is None:
            raise MissingSection(f"section '{name}' not found in order")
        bounds.append((name, match.start(), match.end()))
        pos = match.end()
    out = {}
    for i, (name, _, end) in enumerate(bounds):
        stop = bounds[i + 1][1] if i + 1 < len(bounds) else len(text)
        out[name] = text[end:stop]
    return out


def _one_line(text: str) -> str:
    return " ".join(line.strip() for line in text.splitlines() if line.strip())


def parse_mutator_output(text: str, requested: ModuleKind | None = None) -> MutatorOutput:
    """Parse the four-section edit reply.

    If ``requested`` is given and section 1 names another module, the
    requested module wins and a TargetMismatch warning is recorded.
    """
    sections = _sequential_sections(text)
    word = re.sub(r"[^a-z]", " ", sections["target"].lower()).split()
    if not word:
        raise MissingSection("section 'target' is empty")
    try:
        target = ModuleKind.parse(word[0])
    except ValueError:
        raise UnknownTarget(f"unknown target module {word[0]!r}") from None
    notes = []
    if requested is not None and target is not requested:
        note = f"mutator targeted {target.value}; keeping blame target {requested.value}"
        notes.append(note)
        warnings.warn(note, TargetMismatch, stacklevel=2)
        target = requested
    revised = sections["revised_spec"].strip("\n").rstrip()
    if not revised.strip():
        raise MissingSection("section 'revised_spec' is empty")
    if len(revised) > MAX_SPEC_CHARS:
        raise MutatorOutputUnparseable(
            f"revised spec has {len(revised)} chars; the cap is {MAX_SPEC_CHARS}")
    return MutatorOutput(target, _one_line(sections["error_mode"]),
                         _one_line(sections["edit_summary"]), revised, notes)


MUTATOR_TEMPLATE = """\
# ROLE
You are a targeted prompt editor for exactly one module of a modular tool-using agent.

# GOAL
Given (i) a target module chosen from Planner, Selector, Caller, and Synthesizer, (ii) the current specification of that module, (iii) a failure episode packet containing the task input x, the module-local trajectory slice (the target module's outputs plus nearby context), the final outcome and verifier feedback, and (iv) the blamer's rationale and blame scores, produce a single minimal and general edit to the selected module that addresses the diagnosed failure mode while preserving the module's interface contract and output format.

# EDITING RULES
- Edit only target module specification; do not modify other modules.
- Do not add new tools or environments.
- Ground the edit in the trajectory
- Make the smallest change that fixes the error or suboptimality.

# HEURISTIC EDIT PATTERNS
- Schema/format error -> add argument checklist, schema verification.
- Wrong tool selection -> add decision rubric mapping subgoals to tools.
- Planning error -> add explicit subgoals, state fields, ordering constraints, prerequisite checks.
- Ungrounded synthesis -> require attribution to tool outputs, prohibit unsupported facts.

# OUTPUT FORMAT
Output plain text with the following sections in this order:

1. Target module
<planner or selector or caller or synthesizer>

2. Diagnosed error mode
<1-2 sentences describing the failure mode grounded in the trajectory>

3. Minimal edit summary
<1-2 short sentences describing the minimal change and why>

4. Revised target module spec
<updated specification text for the target module only>

# TARGET MODULE
{{target_module}}

# CURRENT SPECIFICATION
{{current_spec}}

# FAILURE EPISODE PACKET
{{episode_packet}}

# BLAMER RATIONALE AND SCORES
{{blame}}
"""

MUTATOR_RETRY = (
    "Your reply could not be parsed ({error}). Answer again with exactly the sections "
    "'1. Target module', '2. Diagnosed error mode', '3. Minimal edit summary' and "
    "'4. Revised target module spec', in that order. The revised spec must be at most "
    f"{MAX_SPEC_CHARS} characters."
)


def render_episode_packet(episode: EpisodeRecord, diagnostics: Sequence[DiagnosticEvent],
                          task: TaskInstance | None) -> str:
    lines = [f"task input x: {task.instruction if task else episode.task_id}",
             "trajectory:", render_trajectory(episode),
             f"outcome: reward {episode.reward:.4f}",
             "verifier feedback:"]
    lines.extend(e.render() for e in diagnostics if e.verdict is Verdict.FAIL)
    return "\n".join(lines)


def render_blame(blame: BlameReport | None) -> str:
    if blame is None:
        return "(none)"
    scores = " ".join(f"{k.value} {blame.scores[k]:.2f}" for k in PIPELINE)
    evidence = "\n".join(blame.evidence)
    return f"scores: {scores}\nevidence:\n{evidence}\ndiagnosis: {blame.diagnosis}"


class ModelMutator:
    """Mutator backed by a chat model; one retry, then MutatorOutputUnparseable."""

    def __init__(self, gateway: Gateway, model_id: str, tasks: Mapping[str, TaskInstance] | None = None,
                 temperature: float = 0.0):
        self.gateway = gateway
        self.model_id = model_id
        self.tasks = dict(tasks or {})
        self.temperature = temperature

    def propose(self, episode, target, genome, diagnostics, blame=None):
        prompt = render_template(MUTATOR_TEMPLATE, {
            "target_module": target.value,
            "current_spec": genome.text(target),
            "episode_packet": render_episode_packet(episode, diagnostics, self.tasks.get(episode.task_id)),
            "blame": render_blame(blame),
        })
        request = chat(self.model_id, None, prompt, self.temperature)
        reply = self.gateway.complete(request)
        try:
            parsed = parse_mutator_output(reply, requested=target)
        except EvoloopError as first:
            logger.info("mutator reply unparseable (%s); retrying", first)
            retry = chat(self.model_id, None, prompt, self.temperature, history=[
                {"role": "assistant", "content": reply},
                {"role": "user", "content": MUTATOR_RETRY.format(error=first)},
            ])
            try:
                parsed = parse_mutator_output(self.gateway.complete(retry), requested=target)
            except EvoloopError as second:
                raise MutatorOutputUnparseable(str(second)) from second
        feedback = f"{parsed.error_mode} {parsed.edit_summary}".strip()
        return MutationProposal(parsed.target, parsed.error_mode, parsed.edit_summary,
                                parsed.revised_spec, feedback, tuple(parsed.warnings))


def generate_feedback(
    episode: EpisodeRecord,
    target: ModuleKind,
    genome: PolicyGenome,
    diagnostics: Sequence[DiagnosticEvent],
    mutator: Mutator,
    blame: BlameReport | None = None,
) -> MutationProposal:
    return mutator.propose(episode, target, genome, diagnostics, blame)


def build_child(parent: PolicyGenome, proposal: MutationProposal, generation: int) -> PolicyGenome:
    return with_replaced_module(parent, proposal.target, proposal.revised_spec, generation)
