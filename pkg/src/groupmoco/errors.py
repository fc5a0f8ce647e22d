"""Exception hierarchy.

Everything a caller can cause (bad config, missing files, malformed input)
derives from :class:`UserError`; the CLI maps those to exit code 1.
"""


class UserError(Exception):
    """Base class for errors caused by inputs rather than by bugs."""


class ConfigError(UserError, ValueError):
    pass


class IngestError(UserError, FileNotFoundError):
    pass


class ParseError(UserError, ValueError):
    pass


class ConsistencyError(UserError, ValueError):
    pass


class CapacityError(UserError, ValueError):
    pass


class FormatError(UserError, ValueError):
    pass


class DomainError(UserError, ValueError):
    pass


class ContractViolation(UserError, ValueError):
    pass


class IntegrityError(UserError, ValueError):
    pass


class PairingError(UserError, ValueError):
    pass


class DependencyError(UserError, FileNotFoundError):
    pass


class TrainingFault(RuntimeError):
    """Raised when optimisation diverges (e.g. NaN loss)."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step
