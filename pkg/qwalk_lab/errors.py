"""Exception hierarchy shared by the lab, the reconstruction and the CLI."""


class QwalkError(Exception):
    """Base class for every error raised by qwalk_lab."""


class ConfigError(QwalkError):
    """Invalid experiment, fiber, source or detector configuration."""


class DimensionError(QwalkError, ValueError):
    """Array shapes that do not fit together."""


class RangeError(QwalkError, ValueError):
    """A scalar or an index outside its allowed range."""


class UnsupportedConfigurationError(QwalkError):
    """A request the model deliberately does not cover (e.g. x == y pairs)."""


class InsufficientStepsError(QwalkError, ValueError):
    """Phase stepping needs at least three steps."""


class PhysicsDegenerateError(QwalkError):
    """The physics has no defined answer for this input."""


class DegenerateTargetError(PhysicsDegenerateError):
    """Target row is zero, or a field has no amplitude to project."""


class UndefinedContrastError(PhysicsDegenerateError):
    """Contrast with a zero distinguishable-photon rate in the denominator."""


class ArtifactError(QwalkError):
    """An output file could not be written, read or verified."""
