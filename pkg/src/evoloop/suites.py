"""Built-in task suites and assembly of run components from a RunConfig."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from .blame import Blamer, ModelBlamer, OracleBlamer, RandomBlamer
from .engine import RunConfig
from .environment import (
    DEFAULT_TOOLS,
    ScriptedEnvironment,
    TaskInstance,
    load_task_suite,
    load_tool_suite,
    parse_task_suite,
)
from .errors import ConfigError, IoError, ParseError
from .gateway import Cassette, CassetteMode, Gateway, HttpTransport, NullTransport, Transport
from .mutation import ModelMutator, Mutator, OracleMutator
from .policy import PolicyGenome, new_seed_genome
from .rollout import ModelRuntime, ModuleRuntime, ScriptedRuntime

# 6 train / 4 selection tasks; the seed genome misses 8 distinct skill tags
CONVERGENCE = "convergence"
# two task clusters whose synthesizer conventions conflict
CLUSTERS = "clusters"

_BUILTIN_FILES = {CONVERGENCE: "convergence_suite.json", CLUSTERS: "cluster_suite.json"}


def builtin_suite(name: str) -> tuple[list[TaskInstance], list[TaskInstance]]:
    try:
        filename = _BUILTIN_FILES[name]
    except KeyError:
        raise ConfigError(f"unknown built-in suite {name!r}; choose from {sorted(_BUILTIN_FILES)}") from None
    text = resources.files("evoloop").joinpath("data", filename).read_text(encoding="utf-8")
    return parse_task_suite(json.loads(text))


def load_suite(ref: str | None) -> tuple[list[TaskInstance], list[TaskInstance]]:
    """A built-in name (optionally ``builtin:`` prefixed), a JSON path, or None for the default."""
    if ref is None:
        return builtin_suite(CONVERGENCE)
    name = ref.removeprefix("builtin:")
    if name in _BUILTIN_FILES:
        return builtin_suite(name)
    return load_task_suite(ref)


def load_seed_genome(path: str | None) -> PolicyGenome:
    if path is None:
        return new_seed_genome()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise IoError(f"seed genome not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    # either a full genome document or a bare {module: text} mapping
    if "specs" in data:
        return PolicyGenome.from_dict(data)
    return new_seed_genome(data)


@dataclass
class Components:
    env: ScriptedEnvironment
    runtime: ModuleRuntime
    blamer: Blamer
    mutator: Mutator
    train: list[TaskInstance]
    selection: list[TaskInstance]
    seed: PolicyGenome
    gateway: Gateway | None = None

    @property
    def tasks(self) -> dict[str, TaskInstance]:
        return {t.id: t for t in self.train + self.selection}


def needs_gateway(config: RunConfig) -> bool:
    return "model" in (config.backend, config.blamer, config.mutator)


def make_gateway(config: RunConfig, cassette_path: str | Path | None,
                 transport: Transport | None = None) -> Gateway:
    mode = CassetteMode(config.cassette_mode)
    if transport is None:
        # replay must never reach the network
        transport = NullTransport() if mode is CassetteMode.REPLAY else HttpTransport.from_env()
    return Gateway(Cassette(mode, cassette_path), transport)


def _model_id(config: RunConfig, override: str | None) -> str:
    model = override or config.model_id or os.environ.get("EVOLOOP_MODEL", "")
    if not model:
        raise ConfigError("a model-backed role needs model_id (or EVOLOOP_MODEL)")
    return model


def build_components(
    config: RunConfig,
    cassette_path: str | Path | None = None,
    transport: Transport | None = None,
    splits: tuple[Sequence[TaskInstance], Sequence[TaskInstance]] | None = None,
) -> Components:
    train, selection = splits if splits is not None else load_suite(config.task_suite)
    tools = load_tool_suite(config.tool_suite) if config.tool_suite else DEFAULT_TOOLS
    env = ScriptedEnvironment(tools)
    tasks = {t.id: t for t in list(train) + list(selection)}
    gateway = make_gateway(config, cassette_path, transport) if needs_gateway(config) else None

    runtime: ModuleRuntime
    if config.backend == "model":
        runtime = ModelRuntime(gateway, _model_id(config, None), config.temperature, config.max_steps)
    else:
        runtime = ScriptedRuntime()

    blamer: Blamer
    if config.blamer == "model":
        blamer = ModelBlamer(gateway, _model_id(config, config.blamer_model_id), tasks, config.temperature)
    elif config.blamer == "random":
        blamer = RandomBlamer(config.rng_seed)
    else:
        blamer = OracleBlamer()

    mutator: Mutator
    if config.mutator == "model":
        mutator = ModelMutator(gateway, _model_id(config, config.mutator_model_id), tasks, config.temperature)
    else:
        mutator = OracleMutator(tasks)

    return Components(env, runtime, blamer, mutator, list(train), list(selection),
                      load_seed_genome(config.seed_genome), gateway)
