"""Exception types shared across the package."""


class FedhomeError(Exception):
    """Base class for all package errors."""


class ConfigError(FedhomeError):
    """Invalid configuration, schedule, or dataset setup."""


class ShapeError(FedhomeError):
    """Array dimensions do not match the model contract."""


class NumericError(FedhomeError):
    """Non-finite values encountered where finite math is required."""


class ProtocolError(FedhomeError):
    """Malformed frame/message or an illegal session transition."""


class FrameTooLarge(ProtocolError):
    """Encoded frame body exceeds the wire limit."""


class DispatchError(FedhomeError):
    """A device received an action it does not support."""


class NotReadyError(FedhomeError):
    """Classification requested before a trained model is available."""


class RunError(FedhomeError):
    """A federated run could not complete under the error policy."""
