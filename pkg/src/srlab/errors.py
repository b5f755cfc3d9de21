"""Exception types raised across the package."""


class SrlabError(Exception):
    """Base class for all package errors."""


class NonFiniteInput(SrlabError, ValueError):
    pass


class ShapeMismatch(SrlabError, ValueError):
    pass


class InvalidProbability(SrlabError, ValueError):
    pass


class InvalidSupport(SrlabError, ValueError):
    pass


class NumericUnderflow(SrlabError, ArithmeticError):
    """A scaling vector collapsed to zero; epsilon is too small for the cost range."""


class StepTooLarge(SrlabError, ArithmeticError):
    pass


class NegativeKL(SrlabError, ValueError):
    pass


class OutOfRange(SrlabError, ValueError):
    pass


class NonFiniteCoordinate(SrlabError, ValueError):
    pass


class ZeroFeature(SrlabError, ValueError):
    pass


class LabelOutOfRange(SrlabError, ValueError):
    pass


class NoNovelPoints(SrlabError, ValueError):
    pass


class NoKnownPoints(SrlabError, ValueError):
    pass


class DivergedLoss(SrlabError, ArithmeticError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class InvalidRatios(SrlabError, ValueError):
    pass


class EmptyRange(SrlabError, ValueError):
    pass


class IdOutOfRange(SrlabError, ValueError):
    pass


class NonFiniteScore(SrlabError, ValueError):
    pass


class OverlappingIdSets(SrlabError, ValueError):
    pass
