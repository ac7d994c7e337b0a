"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid configuration value. The offending field is named in the message."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class CapabilityError(RuntimeError):
    """The differentiation tape cannot provide what was asked (e.g. second order)."""


class FormatError(ValueError):
    """Malformed binary file."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class UnsupportedVersionError(FormatError):
    pass


class LoadError(RuntimeError):
    """Checkpoint does not match the configuration it is loaded into."""
