"""Exception types shared across the package.

Validation problems subclass `VoldiffValueError`; the CLI maps those to exit code 2.
"""


class VoldiffError(Exception):
    pass


class VoldiffValueError(VoldiffError, ValueError):
    pass


class InvalidArgument(VoldiffValueError):
    pass


class ShapeError(VoldiffValueError):
    pass


class BoundsError(VoldiffValueError):
    pass


class InvalidMaskError(VoldiffValueError):
    pass


class MissingConditionError(VoldiffValueError):
    pass


class FormatError(VoldiffValueError):
    pass


class LayoutError(FormatError):
    pass


class UndefinedMetricError(VoldiffValueError):
    pass


class EmptyROIError(VoldiffValueError):
    pass


class TrainingDivergedError(VoldiffError, RuntimeError):
    pass
