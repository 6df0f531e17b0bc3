"""Exception types shared across the package."""


class PatchActorError(Exception):
    """Base class for all package errors."""


class InvalidArgument(PatchActorError, ValueError):
    pass


class EmptySupervision(PatchActorError):
    """A grounding record whose box covers no patch cannot be trained on."""

    def __init__(self, message="mask has no positive patch", indices=()):
        super().__init__(message)
        self.indices = list(indices)


class GenerationFailed(PatchActorError):
    pass


class NumericalError(PatchActorError, ArithmeticError):
    pass


class UnsupportedVersion(PatchActorError):
    pass


class SchemaError(PatchActorError, ValueError):
    """A file parsed but does not match the expected layout."""


class DegenerateLabels(PatchActorError):
    pass
