"""Exception taxonomy shared across the package.

Every public operation raises one of these instead of bare ValueError so the
CLI can map failures onto its exit-code table.
"""


class ImtError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ImtError, ValueError):
    """An argument violates an operation's precondition."""


class DegenerateInputError(InvalidInputError):
    """Input is structurally valid but degenerate (e.g. all-zero stack)."""


class InvalidStateError(ImtError, ValueError):
    """A state object (normalization factors, optimizer state) is unusable."""


class FormatError(ImtError, ValueError):
    """A file does not conform to its binary/JSON format.

    ``offset`` is the byte offset at which the problem was detected, when
    known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TruncationError(FormatError):
    """File payload is shorter than its header claims."""


class ConfigError(InvalidInputError):
    """A configuration document failed validation."""


class NumericalFailureError(ImtError, ArithmeticError):
    """A computation produced non-finite values.

    ``where`` names the layer or tensor that went non-finite.
    """

    def __init__(self, message: str, where: str | None = None):
        if where is not None:
            message = f"{message} (in {where})"
        super().__init__(message)
        self.where = where


class BaselineError(ImtError, RuntimeError):
    """An external baseline denoiser failed (bad exit code or timeout)."""


class CheckpointMismatchError(ImtError, ValueError):
    """A checkpoint is inconsistent with its own manifest or the requested
    configuration."""
