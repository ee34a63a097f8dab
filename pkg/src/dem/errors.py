"""Exception types raised across the package."""


class DEMError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InvalidSpec(DEMError, ValueError):
    exit_code = 2


class InvalidConfig(DEMError, ValueError):
    exit_code = 2


class DataError(DEMError, ValueError):
    exit_code = 3


class DegenerateLabels(DataError):
    pass


class DegeneratePseudoLabels(DataError):
    pass


class TooFewSamples(DataError):
    pass


class EmptyBatch(DataError):
    pass


class EmptySampleSet(DataError):
    pass


class EmptySelection(DataError):
    pass


class SingleClass(DataError):
    pass


class SingleParent(DataError):
    pass


class IndexOutOfRange(DataError, IndexError):
    pass


class ShapeMismatch(DataError):
    pass


class CorruptCheckpoint(DataError):
    pass


class FrozenColumn(DEMError, RuntimeError):
    pass


class NumericalError(DEMError, ArithmeticError):
    exit_code = 4


class NonFiniteGradient(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class NonFiniteReward(NumericalError):
    pass


class IoFailure(DEMError, OSError):
    exit_code = 3
