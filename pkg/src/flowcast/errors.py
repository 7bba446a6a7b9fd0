"""Exception types shared across the package."""


class FlowcastError(Exception):
    """Base class for package errors."""


class DimensionError(FlowcastError, ValueError):
    """Array shapes incompatible with the requested operation."""


class ConfigError(FlowcastError, ValueError):
    """Invalid, inconsistent, or unknown configuration."""


class FormatError(FlowcastError, ValueError):
    """Malformed on-disk artifact (tensor container, manifest, CSV)."""


class NumericError(FlowcastError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class MissingPrerequisiteError(FlowcastError, RuntimeError):
    """A required earlier pipeline stage has not been run."""


class FrozenViolationError(FlowcastError, RuntimeError):
    """A model that must stay frozen would receive gradient updates."""
