"""Blame-targeted evolutionary optimization of modular tool-use agent prompts."""

from .blame import BlameReport, ModelBlamer, OracleBlamer, RandomBlamer, assign_blame, extract_diagnostics
from .engine import Evolution, GenerationRecord, PopulationEntry, RunConfig, run_generations
from .environment import ScriptedEnvironment, TaskInstance, ToolDef, load_task_suite
from .errors import EvoloopError
from .gateway import Cassette, CassetteMode, ChatRequest, Gateway, HttpTransport
from .mutation import ModelMutator, MutationProposal, OracleMutator
from .policy import PIPELINE, ModuleKind, PolicyGenome, new_seed_genome
from .rollout import EpisodeRecord, ModelRuntime, ScriptedRuntime, execute_episode

__version__ = "0.1.0"

__all__ = [
    "BlameReport", "Cassette", "CassetteMode", "ChatRequest", "EpisodeRecord", "EvoloopError",
    "Evolution", "Gateway", "GenerationRecord", "HttpTransport", "ModelBlamer", "ModelMutator",
    "ModelRuntime", "ModuleKind", "MutationProposal", "OracleBlamer", "OracleMutator", "PIPELINE",
    "PolicyGenome", "PopulationEntry", "RandomBlamer", "RunConfig", "ScriptedEnvironment",
    "ScriptedRuntime", "TaskInstance", "ToolDef", "assign_blame", "execute_episode",
    "extract_diagnostics", "load_task_suite", "new_seed_genome", "run_generations",
]
