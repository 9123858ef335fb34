"""Exception hierarchy shared by every module of the package."""


class CLPError(Exception):
    """Base class for all package errors."""


class ConformanceError(CLPError, ValueError):
    """Operand shapes do not conform for the requested operation."""


class DomainError(CLPError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class NumericError(CLPError, ArithmeticError):
    """A NaN or infinity was produced."""


class ContractError(CLPError, RuntimeError):
    """A documented precondition was violated by the caller."""


class ConfigError(CLPError, ValueError):
    """Invalid configuration value or combination."""


class InfeasibleError(CLPError, ValueError):
    """The requested construction cannot be satisfied by the data."""


class AugmentationError(CLPError, ValueError):
    """A sample cannot be augmented as requested."""


class FormatError(CLPError, ValueError):
    """A binary container is malformed.

    Attributes:
        offset: byte offset at which the problem was detected.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VersioningError(CLPError, ValueError):
    """A checkpoint does not match the model it is loaded into."""
