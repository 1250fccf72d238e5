"""Exception hierarchy shared across the package."""


class SeqvisError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SeqvisError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateSaliencyError(SeqvisError):
    """The saliency map carries no contrast, so no threshold separates it."""


class MaskedActionError(SeqvisError):
    """An action has probability exactly zero under the current mask."""


class DivergentKLError(SeqvisError):
    """KL(p || q) is infinite because q has no mass where p does."""


class GenerationError(SeqvisError):
    """A synthetic task could not be generated within the retry budget."""


class ConfigError(SeqvisError, ValueError):
    """A configuration failed schema validation."""


class ParseError(SeqvisError, ValueError):
    """A file could not be parsed. ``offset`` is the byte position, if known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointVersionError(SeqvisError):
    """A checkpoint does not match the dimensions it is being used with."""
