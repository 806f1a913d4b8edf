"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class FormatError(ValueError):
    """A binary file (checkpoint or dataset container) is malformed."""
