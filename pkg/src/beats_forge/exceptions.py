"""Exception hierarchy shared by every module."""


class BeatsForgeError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class ShapeError(BeatsForgeError, ValueError):
    pass


class ContractError(BeatsForgeError, RuntimeError):
    pass


class ConfigError(BeatsForgeError, ValueError):
    pass


class FormatError(BeatsForgeError, ValueError):
    """Malformed binary or WAV container."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StatsError(BeatsForgeError, ValueError):
    pass


class DependencyError(BeatsForgeError, RuntimeError):
    pass


class ModeError(BeatsForgeError, RuntimeError):
    pass


class NonFiniteError(BeatsForgeError, FloatingPointError):
    pass
