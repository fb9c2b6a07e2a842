"""Exception hierarchy. Each class carries a distinct process exit code."""

from __future__ import annotations


class PopcfxError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(PopcfxError):
    """Invalid or unparseable configuration."""

    exit_code = 2


class MissingArtifactError(PopcfxError):
    """A pipeline stage requires an output that an earlier stage has not produced."""

    exit_code = 3

    def __init__(self, message: str, stage_to_run: str | None = None):
        super().__init__(message)
        self.stage_to_run = stage_to_run


class DataError(PopcfxError):
    """Malformed, missing, or inconsistent input data."""

    exit_code = 4


class ProviderError(PopcfxError):
    """Text-generation or embedding backend failure."""

    exit_code = 5

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class TrainingError(PopcfxError):
    """Recommender training diverged or could not proceed."""

    exit_code = 6

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class InfluenceError(PopcfxError):
    """Influence state construction or counterfactual search failure."""

    exit_code = 7


class FilterInterrupted(ProviderError):
    """Provider died mid way through a greedy filter loop.

    Completed provider calls are already in the cache; `partial` holds the
    steps finished before the failure.
    """

    exit_code = 5

    def __init__(self, message: str, steps_completed: int, partial=None):
        super().__init__(message)
        self.steps_completed = steps_completed
        self.partial = partial
