"""Exception hierarchy shared across the package."""


class LlapError(Exception):
    pass


class DimensionMismatch(LlapError, ValueError):
    pass


class NotSquare(LlapError, ValueError):
    pass


class NotSymmetric(LlapError, ValueError):
    pass


class NotPositiveDefinite(LlapError, ArithmeticError):
    def __init__(self, message, max_jitter=None):
        super().__init__(message)
        self.max_jitter = max_jitter


class IndexOutOfRange(LlapError, IndexError):
    pass


class DegenerateVariance(LlapError, ArithmeticError):
    pass


class ZeroDirection(LlapError, ValueError):
    pass


class NonPositiveScale(LlapError, ValueError):
    pass


class InvalidTarget(LlapError, ValueError):
    pass


class Diverged(LlapError, ArithmeticError):
    def __init__(self, message, epoch=None, params=None):
        super().__init__(message)
        self.epoch = epoch
        self.params = params


class NotConverged(LlapError, RuntimeError):
    """Iteration cap reached; ``best`` holds the last iterate and ``info`` diagnostics."""

    def __init__(self, message, best=None, info=None):
        super().__init__(message)
        self.best = best
        self.info = info or {}


class DegenerateGroup(LlapError, ArithmeticError):
    pass


class NegativeStdDev(LlapError, ValueError):
    pass


class BadMagic(LlapError, ValueError):
    pass


class TruncatedFile(LlapError, ValueError):
    pass


class ConfigError(LlapError, ValueError):
    pass
