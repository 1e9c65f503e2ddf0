"""Exception types shared across the package."""


class SeqBridgeError(Exception):
    """Base class for all package errors."""


class DimensionError(SeqBridgeError):
    """Operand shapes are incompatible. The message names both shapes."""


class DomainError(SeqBridgeError):
    """A value is outside the domain an operation accepts."""


class DegenerateInputError(SeqBridgeError):
    """Input is structurally valid but degenerate (e.g. all-zero matrix)."""


class ConfigError(SeqBridgeError):
    """A configuration is inconsistent or incomplete."""


class IntegrityError(SeqBridgeError):
    """A frozen-parameter digest or manifest cross-check failed."""


class TrainingError(SeqBridgeError):
    """Training diverged or hit a non-finite loss."""


class UsageError(SeqBridgeError):
    """Command line was invoked incorrectly (exit code 2)."""
