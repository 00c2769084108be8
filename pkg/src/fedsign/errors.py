"""Shared exception types."""


class FedsignError(Exception):
    pass


class ShapeError(FedsignError, ValueError):
    """Input/shape mismatch."""


class StateError(FedsignError, RuntimeError):
    """Operation invoked in the wrong state (e.g. backward before forward)."""


class KeyMismatchError(FedsignError, ValueError):
    """Watermark key does not fit the model it is applied to."""


class CapacityError(FedsignError, ValueError):
    """Requested signature does not fit the selected parameter pool."""


class ConfigError(FedsignError, ValueError):
    """Invalid run configuration or manifest."""


class FormatError(FedsignError, ValueError):
    """Malformed artifact file."""
