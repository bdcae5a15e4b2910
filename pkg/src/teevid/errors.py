"""Exception hierarchy shared by every teevid module."""

from __future__ import annotations


class TeeError(Exception):
    """Base class for all library errors."""


class GeometryError(TeeError, ValueError):
    """Degenerate or non-finite box."""


class DomainError(TeeError, ValueError):
    """Numeric argument outside its valid domain."""


class ConfigError(TeeError, ValueError):
    """Invalid configuration or unusable input collection."""


class SchemaError(TeeError, ValueError):
    """Malformed on-disk artifact."""

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ShapeError(TeeError, ValueError):
    """Tensor shape does not match the declared contract."""


class ContractError(TeeError, RuntimeError):
    """Caller violated an operation precondition."""


class LifecycleError(TeeError, RuntimeError):
    """Object used before it was fully initialised."""


class MetricError(TeeError, ValueError):
    """Metric is undefined for the given inputs."""


class IntegrityError(TeeError, ValueError):
    """Artifacts that must come from one run do not."""
