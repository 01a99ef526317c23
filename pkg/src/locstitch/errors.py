"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class LocStitchError(Exception):
    exit_code = 1


class UsageError(LocStitchError):
    exit_code = 1


class NumericError(LocStitchError):
    """Divergence, singular solves, failed searches."""

    exit_code = 2


class DivergenceError(NumericError):
    pass


class SingularityError(NumericError):
    pass


class MismatchError(LocStitchError):
    exit_code = 3


class StructuralMismatchError(MismatchError):
    """Name or shape sets differ between two parameter containers."""


class BaseMismatchError(MismatchError):
    """A task vector was computed against a different pretrained model."""


class FormatError(LocStitchError):
    exit_code = 4

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CorruptionError(FormatError):
    pass
