"""Exception hierarchy shared across the package.

Validation problems (bad inputs, malformed files, shape conflicts) derive
from :class:`ValidationError`; filesystem problems derive from
:class:`IoFailure`.  The CLI maps these to exit codes 1 and 2.
"""


class DgsegError(Exception):
    """Base class for all package errors."""


class ValidationError(DgsegError, ValueError):
    """Invalid input data, configuration, or arguments."""


class IoFailure(DgsegError, OSError):
    """A file could not be read or written."""


# scene file parsing
class MalformedHeader(ValidationError):
    pass


class FieldCountMismatch(ValidationError):
    pass


class LabelOutOfRange(ValidationError):
    pass


class NonFiniteCoordinate(ValidationError):
    pass


class EmptyCloud(ValidationError):
    pass


class InvalidClassId(ValidationError):
    pass


# clustering
class TooFewSamples(ValidationError):
    pass


# mixing
class NoFloor(ValidationError):
    pass


# augmentation
class EmptyResult(DgsegError):
    """An operation culled every point; retry with another seed."""


# encoder / prototypes
class ShapeMismatch(ValidationError):
    pass


class EmptyBatch(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class UninitializedClass(ValidationError):
    pass


class ClassAbsent(ValidationError):
    pass


class ClassAbsentInScene(ValidationError):
    pass


class AllIgnored(ValidationError):
    pass


class NonFiniteInput(ValidationError):
    pass


# evaluation
class LengthMismatch(ValidationError):
    pass
