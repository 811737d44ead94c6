"""Exception types shared across the package."""


class ThermosplatError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(ThermosplatError, ValueError):
    """An argument violates a documented precondition."""


class EmptyInputError(InvalidInputError):
    """A non-empty collection was required."""


class InvalidConfigError(ThermosplatError, ValueError):
    """A configuration value is out of its valid range."""


class InvalidSceneError(ThermosplatError, ValueError):
    """Scene field arrays disagree in shape or contain invalid values."""


class StaleTapeError(ThermosplatError, RuntimeError):
    """A backward tape was replayed after the scene it recorded changed."""


class ParseError(ThermosplatError, ValueError):
    """A file could not be parsed; the message carries the offending location."""


class UnsupportedModelError(ParseError):
    """A camera model outside the supported set was encountered."""


class IncompatibleCheckpointError(ParseError):
    """A checkpoint has the wrong magic bytes or format version."""


class MissingPriorError(ThermosplatError, ValueError):
    """Depth supervision was requested but some views have no depth prior."""
