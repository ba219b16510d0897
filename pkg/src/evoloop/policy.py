"""Policy genomes: four module specifications plus lineage metadata."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from functools import total_ordering
from types import MappingProxyType
from typing import Any, Mapping

from .errors import EmptySpec, MissingModule, NoOpEdit


@total_ordering
class ModuleKind(Enum):
    """The four roles of the tool-use policy, in pipeline order."""

    PLANNER = "planner"
    SELECTOR = "selector"
    CALLER = "caller"
    SYNTHESIZER = "synthesizer"

    @property
    def rank(self) -> int:
        return _RANK[self]

    def __lt__(self, other):
        if not isinstance(other, ModuleKind):
            return NotImplemented
        return self.rank < other.rank

    @classmethod
    def parse(cls, name: str) -> "ModuleKind":
        return cls(name.strip().lower())


PIPELINE: tuple[ModuleKind, ...] = tuple(ModuleKind)
_RANK = {kind: i for i, kind in enumerate(PIPELINE)}

SEED_PROMPTS: dict[ModuleKind, str] = {
    ModuleKind.PLANNER: (
        "You are a planning agent. Your task is to decompose the user's complex "
        "instruction into a sequential list of clear, executable subgoals"
    ),
    ModuleKind.SELECTOR: (
        "You are a tool selection agent. Given the current subgoal and the list of "
        "available tools, select the most appropriate tool."
    ),
    ModuleKind.CALLER: (
        "You are a tool calling agent. Given the selected tool and its documentation, "
        "generate the specific arguments required to execute it."
    ),
    ModuleKind.SYNTHESIZER: (
        "You are a synthesis agent. Review the user's original query and the history "
        "of tool executions, then synthesize this information to provide the answer."
    ),
}


@dataclass(frozen=True)
class ModuleSpec:
    kind: ModuleKind
    text: str
    revision: int = 0

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise EmptySpec(f"{self.kind.value} spec is empty")
        if self.revision < 0:
            raise ValueError("revision must be non-negative")


@dataclass(frozen=True)
class PolicyGenome:
    """An immutable candidate policy.

    ``specs`` always holds all four module kinds. A seed genome has no parent
    and no mutated module; a child differs from its parent in exactly the
    module named by ``mutated_module``.
    """

    id: str
    specs: Mapping[ModuleKind, ModuleSpec]
    parent_id: str | None = None
    mutated_module: ModuleKind | None = None
    created_generation: int = 0
    _fingerprint: str = field(default="", init=False, repr=False, compare=False)

    def __post_init__(self):
        missing = [k.value for k in PIPELINE if k not in self.specs]
        if missing:
            raise MissingModule(f"missing module spec(s): {', '.join(missing)}")
        if len(self.specs) != len(PIPELINE):
            raise MissingModule("specs must contain exactly the four module kinds")
        for kind, spec in self.specs.items():
            if spec.kind is not kind:
                raise ValueError(f"spec under {kind.value} has kind {spec.kind.value}")
        if self.parent_id is None and self.mutated_module is not None:
            raise ValueError("a seed genome cannot name a mutated module")
        if self.parent_id is not None and self.mutated_module is None:
            raise ValueError("a child genome must name its mutated module")
        ordered = MappingProxyType({k: self.specs[k] for k in PIPELINE})
        object.__setattr__(self, "specs", ordered)
        object.__setattr__(self, "_fingerprint", _digest_texts(self.texts()))

    def text(self, kind: ModuleKind) -> str:
        return self.specs[kind].text

    def texts(self) -> tuple[str, ...]:
        return tuple(self.specs[k].text for k in PIPELINE)

    @property
    def fingerprint(self) -> str:
        return self._fingerprint

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "parent_id": self.parent_id,
            "mutated_module": self.mutated_module.value if self.mutated_module else None,
            "created_generation": self.created_generation,
            "specs": {
                k.value: {"text": s.text, "revision": s.revision}
                for k, s in self.specs.items()
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PolicyGenome":
        raw = data.get("specs") or {}
        specs = {}
        for name, body in raw.items():
            kind = ModuleKind.parse(name)
            specs[kind] = ModuleSpec(kind, body["text"], int(body.get("revision", 0)))
        mutated = data.get("mutated_module")
        return cls(
            id=data["id"],
            specs=specs,
            parent_id=data.get("parent_id"),
            mutated_module=ModuleKind.parse(mutated) if mutated else None,
            created_generation=int(data.get("created_generation", 0)),
        )


def _digest_texts(texts: tuple[str, ...]) -> str:
    payload = json.dumps(list(texts), ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def genome_fingerprint(genome: PolicyGenome) -> str:
    """Content digest over the four spec texts only (64 hex chars)."""
    return genome.fingerprint


def _make_id(fingerprint: str, generation: int) -> str:
    return f"{fingerprint[:12]}-g{generation}"


def new_seed_genome(
    specs: Mapping[ModuleKind | str, str] | None = None, genome_id: str | None = None
) -> PolicyGenome:
    """Build a generation-0 genome; defaults to the hand-written seed prompts."""
    if specs is None:
        specs = SEED_PROMPTS
    by_kind = {
        (k if isinstance(k, ModuleKind) else ModuleKind.parse(k)): v for k, v in specs.items()
    }
    missing = [k.value for k in PIPELINE if k not in by_kind]
    if missing:
        raise MissingModule(f"missing module spec(s): {', '.join(missing)}")
    module_specs = {k: ModuleSpec(k, by_kind[k], 0) for k in PIPELINE}
    fp = _digest_texts(tuple(module_specs[k].text for k in PIPELINE))
    return PolicyGenome(id=genome_id or _make_id(fp, 0), specs=module_specs)


def with_replaced_module(
    parent: PolicyGenome,
    target: ModuleKind,
    new_text: str,
    generation: int,
    genome_id: str | None = None,
) -> PolicyGenome:
    """Return a child whose ``target`` spec is ``new_text``; siblings are shared as-is."""
    if not new_text or not new_text.strip():
        raise EmptySpec(f"replacement {target.value} spec is empty")
    old = parent.specs[target]
    if new_text == old.text:
        raise NoOpEdit(f"replacement {target.value} spec equals the parent's")
    specs = dict(parent.specs)
    specs[target] = ModuleSpec(target, new_text, old.revision + 1)
    fp = _digest_texts(tuple(specs[k].text for k in PIPELINE))
    return PolicyGenome(
        id=genome_id or _make_id(fp, generation),
        specs=specs,
        parent_id=parent.id,
        mutated_module=target,
        created_generation=generation,
    )


def changed_modules(parent: PolicyGenome, child: PolicyGenome) -> set[ModuleKind]:
    return {k for k in PIPELINE if parent.text(k) != child.text(k)}
