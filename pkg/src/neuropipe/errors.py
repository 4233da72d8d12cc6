"""Exception hierarchy shared by every neuropipe module."""


class NeuropipeError(Exception):
    """Base class for all package errors."""


# imaging I/O
class UnknownFormat(NeuropipeError, ValueError):
    pass


class CorruptHeader(NeuropipeError, ValueError):
    pass


class NonFiniteData(NeuropipeError, ValueError):
    pass


class IoFailure(NeuropipeError, OSError):
    pass


class IndexOutOfRange(NeuropipeError, IndexError):
    pass


class VoiOutOfBounds(NeuropipeError, IndexError):
    pass


class ShapeMismatch(NeuropipeError, ValueError):
    pass


class DuplicateModality(NeuropipeError, ValueError):
    pass


class ProvenanceMismatch(NeuropipeError, ValueError):
    pass


# augmentation
class NonPositiveFactor(NeuropipeError, ValueError):
    pass


class DegenerateOutput(NeuropipeError, ValueError):
    pass


# operators and losses
class WindowTooLarge(NeuropipeError, ValueError):
    pass


class RoiOutOfBounds(NeuropipeError, ValueError):
    pass


class RoiTooSmall(NeuropipeError, ValueError):
    pass


class BadLabel(NeuropipeError, ValueError):
    pass


class NegativeWeight(NeuropipeError, ValueError):
    pass


# models and training
class BadConfig(NeuropipeError, ValueError):
    pass


class WrongChannels(NeuropipeError, ValueError):
    pass


class WrongSize(NeuropipeError, ValueError):
    pass


class EmptyDataset(NeuropipeError, ValueError):
    pass


class DivergedLoss(NeuropipeError, RuntimeError):
    pass


class MissingTruth(NeuropipeError, ValueError):
    pass


class EmptySubset(NeuropipeError, ValueError):
    pass


# synthetic data
class SpecInfeasible(NeuropipeError, ValueError):
    pass


# metrics
class LengthMismatch(NeuropipeError, ValueError):
    pass


class UndefinedMetric(NeuropipeError, ArithmeticError):
    pass


# harness
class ConfigError(NeuropipeError, ValueError):
    pass
