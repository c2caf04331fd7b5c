"""Exception hierarchy; the CLI maps these onto exit codes."""


class MidgetError(Exception):
    pass


class ValidationError(MidgetError, ValueError):
    """Input data or arguments violate a documented invariant."""


class FormatError(ValidationError):
    """A file does not conform to its on-disk format."""


class ConfigError(ValidationError):
    """Configuration values are inconsistent or incompatible with a checkpoint."""


class DivergenceError(MidgetError, RuntimeError):
    """Training produced a non-finite loss."""
