"""Exception types raised across the package."""


class SpoiError(ValueError):
    """Base class for all input and numerical errors raised by spoiae."""


class UnknownChromophore(SpoiError):
    pass


class GridOutOfTabulatedRange(SpoiError):
    pass


class RankDeficientSpectra(SpoiError):
    pass


class StalePseudoinverse(SpoiError):
    pass


class DimensionMismatch(SpoiError):
    pass


class BatchTooSmall(SpoiError):
    pass


class NonFiniteGradient(SpoiError, ArithmeticError):
    pass


class NonFiniteLoss(SpoiError, ArithmeticError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class ZeroDataMatrix(SpoiError):
    pass


class EmptyBatch(SpoiError):
    pass


class EmptyMask(SpoiError):
    pass


class WrongChromophoreCount(SpoiError):
    pass


class InclusionOutOfBounds(SpoiError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class FormatError(SpoiError):
    """A file does not match the expected binary or text layout."""
