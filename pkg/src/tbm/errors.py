"""Exception types raised across the package."""


class TbmError(Exception):
    """Base class for every error raised by tbm."""


class ShapeMismatch(TbmError, ValueError):
    pass


class KernelTooLong(ShapeMismatch):
    pass


class InvalidProbability(TbmError, ValueError):
    pass


class NotScalar(TbmError, ValueError):
    pass


class EmptyGradient(TbmError, RuntimeError):
    pass


class EmptyCorpus(TbmError, ValueError):
    pass


class MissingGeology(TbmError, KeyError):
    def __init__(self, ring):
        super().__init__(f"no geology record for ring {ring}")
        self.ring = ring


class AllMissing(TbmError, ValueError):
    pass


class WindowTooLarge(TbmError, ValueError):
    pass


class ZeroVariance(TbmError, ValueError):
    pass


class ZeroRange(TbmError, ValueError):
    pass


class NonPositiveValue(TbmError, ValueError):
    pass


class TooFewSamples(TbmError, ValueError):
    pass


class ConfigInvalid(TbmError, ValueError):
    pass


class EmptyDataset(TbmError, ValueError):
    pass


class DimMismatch(TbmError, ValueError):
    pass


class ConstantTarget(TbmError, ValueError):
    pass


class LengthMismatch(TbmError, ValueError):
    pass


class RangeViolation(TbmError, ValueError):
    pass


class EmptyScores(TbmError, ValueError):
    pass


class NoLabels(TbmError, ValueError):
    pass


class NoRegimes(TbmError, ValueError):
    pass


class EmptyGeology(TbmError, ValueError):
    pass


class FaultOutOfBounds(TbmError, IndexError):
    pass


class SchemaMismatch(TbmError, ValueError):
    def __init__(self, column, path=None):
        where = f" in {path}" if path else ""
        super().__init__(f"missing column {column!r}{where}")
        self.column = column


class IntegrityError(TbmError, RuntimeError):
    pass
