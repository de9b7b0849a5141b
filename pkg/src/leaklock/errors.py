"""Exception types shared across the package."""


class LeaklockError(Exception):
    """Base class for all package errors."""


class ShapeError(LeaklockError, ValueError):
    pass


class DomainError(LeaklockError, ValueError):
    pass


class ConfigError(LeaklockError, ValueError):
    pass


class CapacityError(LeaklockError, ValueError):
    pass


class FormatError(LeaklockError, ValueError):
    """Raised when a binary file fails magic, version, or CRC checks."""


class TrainingError(LeaklockError, RuntimeError):
    pass
