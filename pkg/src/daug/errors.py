"""Exception types shared across the pipeline."""


class ConfigurationError(ValueError):
    """Invalid sizes, probabilities, schedule bounds or config documents."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class GuidanceError(RuntimeError):
    """Classifier guidance produced a non-finite gradient."""


class StaleCacheError(RuntimeError):
    """A cached artifact was produced by different models or settings."""


class StalePromptError(RuntimeError):
    """Class-prompt embeddings are out of date w.r.t. the text encoder."""


class UndefinedMetricError(ValueError):
    """A metric is mathematically undefined for the given inputs."""


class DependencyError(RuntimeError):
    """An upstream pipeline stage has not been run."""

    def __init__(self, stage, command):
        super().__init__(f"stage '{stage}' is missing; run `daug {command}` first")
        self.stage = stage
        self.command = command


class ConflictError(RuntimeError):
    """An artifact exists with a different config hash; pass --force to overwrite."""
