"""Exception hierarchy shared across the package."""


class SelfPromptError(Exception):
    """Base class for all package errors."""


class ConfigError(SelfPromptError, ValueError):
    """Inconsistent configuration, shapes or flags."""


class InputError(SelfPromptError, ValueError):
    """Invalid input data (non-finite pixels, out-of-range prompts, empty masks)."""


class GenerationError(SelfPromptError):
    """Synthetic corpus generation cannot satisfy the requested geometry."""


class IngestionError(SelfPromptError):
    """An external image/mask directory could not be loaded."""


class TrainingError(SelfPromptError):
    """Training diverged or was asked to do something impossible."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
