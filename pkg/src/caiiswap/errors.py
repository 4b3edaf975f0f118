"""Exception hierarchy shared by every subsystem."""


class CaiiSwapError(Exception):
    """Base class for domain errors (the CLI maps these to exit code 1)."""


class ShapeMismatch(CaiiSwapError, ValueError):
    pass


class ChannelMismatch(ShapeMismatch):
    pass


class ConfigError(CaiiSwapError, ValueError):
    """Invalid configuration value. ``key`` names the offending entry."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class ConfigMismatch(ConfigError):
    pass


# data pipeline
class DegenerateLandmarks(CaiiSwapError, ValueError):
    pass


class OutOfBounds(CaiiSwapError, ValueError):
    pass


class ParseError(CaiiSwapError, ValueError):
    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class DuplicateId(CaiiSwapError, ValueError):
    def __init__(self, image_id, line_no=None):
        self.image_id = image_id
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"duplicate image_id {image_id!r}{where}")


class MissingFile(CaiiSwapError, FileNotFoundError):
    pass


class InsufficientIdentities(CaiiSwapError, ValueError):
    pass


# captioning
class EndpointUnavailable(CaiiSwapError, ConnectionError):
    pass


class EmptyResponse(CaiiSwapError, ValueError):
    pass


class OverBudget(UserWarning):
    """Emitted (as a warning, never raised) when a caption exceeds the word ceiling."""


# encoders
class BackendNotLoaded(CaiiSwapError, RuntimeError):
    pass


class EmptyText(CaiiSwapError, ValueError):
    pass


# losses / fusion
class ZeroVector(CaiiSwapError, ValueError):
    pass


class IndexOutOfRange(CaiiSwapError, IndexError):
    pass


# training / evaluation
class NonFiniteLoss(CaiiSwapError, FloatingPointError):
    def __init__(self, term, value, diagnostics=None):
        self.term = term
        self.value = value
        self.diagnostics = diagnostics or {}
        super().__init__(f"non-finite loss term {term!r}: {value}")


class ResumeMismatch(CaiiSwapError, RuntimeError):
    pass


class TooFewSamples(CaiiSwapError, ValueError):
    pass


class EmptyGallery(CaiiSwapError, ValueError):
    pass
