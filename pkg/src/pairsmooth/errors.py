"""Exception hierarchy shared by all pairsmooth modules."""


class PairsmoothError(Exception):
    """Base class for all library errors."""


# --- data ingestion -------------------------------------------------------

class DataError(PairsmoothError):
    pass


class MissingColumn(DataError):
    pass


class NonNumeric(DataError):
    pass


class DuplicateVisit(DataError):
    pass


class NonConstantGroup(DataError):
    pass


class EmptyGroup(DataError):
    pass


# --- basis construction ---------------------------------------------------

class BasisError(PairsmoothError):
    pass


class TooFewPoints(BasisError):
    pass


class DegenerateGeometry(BasisError):
    pass


class SingularPenalty(BasisError):
    pass


# --- design assembly ------------------------------------------------------

class DesignError(PairsmoothError):
    pass


class RankDeficientX(DesignError):
    pass


class GroupMismatch(DesignError):
    pass


# --- model fitting --------------------------------------------------------

class FitError(PairsmoothError):
    pass


class NonPositiveDefinite(FitError):
    pass


class NoConvergence(FitError):
    def __init__(self, message, best_point=None, grad_norm=None):
        super().__init__(message)
        self.best_point = best_point
        self.grad_norm = grad_norm


class UnknownGroup(PairsmoothError):
    pass


class UnknownOutcome(PairsmoothError):
    pass


# --- inference ------------------------------------------------------------

class InferenceError(PairsmoothError):
    pass


class TooManyFailures(InferenceError):
    pass


class InvalidSpecPair(InferenceError):
    pass


class NonNested(InferenceError):
    pass
