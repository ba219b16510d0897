"""Typed errors raised across the package.

Every error carries its class name to the CLI, which prints it on stderr
before exiting nonzero.
"""

from __future__ import annotations


class EvoloopError(Exception):
    """Base class for all package errors."""


# genome construction
class MissingModule(EvoloopError):
    pass


class EmptySpec(EvoloopError):
    pass


class NoOpEdit(EvoloopError):
    pass


# task suites and scoring
class ParseError(EvoloopError):
    pass


class OverlappingSplits(EvoloopError):
    pass


class EmptySplit(EvoloopError):
    pass


class OutOfRangeStageCount(EvoloopError):
    pass


# rollouts
class RuntimeFailure(EvoloopError):
    """A module runtime could not produce a stage output."""


class EmptyBatch(EvoloopError):
    pass


# blame
class EmptyTrajectory(EvoloopError):
    pass


class PerfectEpisode(EvoloopError):
    """Blame was requested for an episode that already earned reward 1."""


class NoFailureEvidence(EvoloopError):
    pass


class MissingSection(EvoloopError):
    pass


class MissingScore(EvoloopError):
    pass


class NonNumericScore(EvoloopError):
    pass


class BlamerOutputUnparseable(EvoloopError):
    pass


# mutation
class NoMissingTag(EvoloopError):
    pass


class UnknownTarget(EvoloopError):
    pass


class MutatorOutputUnparseable(EvoloopError):
    pass


# population / engine
class EmptyPopulation(EvoloopError):
    pass


class UnnormalizedWeights(EvoloopError):
    pass


class EmptySelectionSet(EvoloopError):
    pass


class RunAborted(EvoloopError):
    """A generation failed; ``history`` holds every record completed before it."""

    def __init__(self, message: str, history: list, cause: BaseException | None = None):
        super().__init__(message)
        self.history = history
        self.cause = cause


# model gateway
class CassetteMiss(EvoloopError):
    pass


class TransportError(EvoloopError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message if status is None else f"{message} (status {status})")
        self.status = status


class BudgetExceeded(EvoloopError):
    pass


class UnboundSlot(EvoloopError):
    pass


# cli / persistence
class UnknownCommand(EvoloopError):
    pass


class ConfigError(EvoloopError):
    pass


class IoError(EvoloopError):
    pass


class SchemaVersionMismatch(EvoloopError):
    pass


class IncompleteLogs(EvoloopError):
    pass


class TargetMismatch(UserWarning):
    """Mutator named a different module than the blame target; the blame target wins."""


class UnusedBinding(UserWarning):
    pass


class ScoreClamped(UserWarning):
    pass
