"""Exception types shared across the package."""


class MultishotError(Exception):
    """Base class for package-specific failures."""


class NotEnoughInternalFramesError(ValueError):
    """Clip too short to sample two strictly-internal frames."""


class CapacityExceededError(ValueError):
    """More memory items than the tiling layout can hold; truncate first."""


class NumericError(ArithmeticError):
    """NaN/Inf encountered in a numeric path (inputs, loss, or training)."""


class ProtocolError(MultishotError):
    """An external client returned a malformed or failed response."""


class DirectorProtocolError(ProtocolError):
    pass


class RefinerProtocolError(ProtocolError):
    pass


class VideoProtocolError(ProtocolError):
    pass


class EmbedderUnavailableError(MultishotError):
    """External embedding service timed out or answered non-2xx."""


class PipelineStageError(MultishotError):
    """A workflow stage failed; partial artifacts persist on disk."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


class ConfigError(ValueError):
    """Run configuration failed schema validation."""
