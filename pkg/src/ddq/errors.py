"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid architecture, shape or run configuration."""


class UsageError(RuntimeError):
    """An operation was called in a state where it is not allowed."""


class ProtocolError(ValueError):
    """Malformed wire frame. ``field`` names the offending part of the frame."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
