"""Exception hierarchy shared across the package."""


class MultiReconError(Exception):
    """Base class for every error raised by this package."""


class GeometryError(MultiReconError, ValueError):
    """Invalid or incompatible voxel grid."""


class DegenerateIntensityError(MultiReconError, ValueError):
    pass


class SchemaError(MultiReconError, ValueError):
    """Label values or manifest content outside the declared schema."""


class UnsupportedFormatError(MultiReconError, ValueError):
    pass


class CorruptFileError(MultiReconError, ValueError):
    pass


class ParameterError(MultiReconError, ValueError):
    pass


class DivergenceError(MultiReconError, ArithmeticError):
    """Raised when an objective becomes non-finite."""


class NoOverlapError(MultiReconError, ValueError):
    pass


class UndefinedDistanceError(MultiReconError, ValueError):
    """Surface distance requested for an empty mask."""


class PlanError(MultiReconError, ValueError):
    pass


class LeakageError(MultiReconError, ValueError):
    """A held-out subject was found in a training set."""


class InputError(MultiReconError, ValueError):
    pass
