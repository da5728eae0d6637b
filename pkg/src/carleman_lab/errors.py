"""Exception types raised across the package."""


class CarlemanLabError(ValueError):
    """Base class for every domain-specific failure."""


# geometry
class NonPositiveF(CarlemanLabError):
    pass


class HullContainsOrigin(CarlemanLabError):
    pass


class EmptyE(CarlemanLabError):
    pass


class OutOfChart(CarlemanLabError):
    pass


# discretization
class UnknownSpace(CarlemanLabError):
    pass


class SingularRiesz(CarlemanLabError):
    pass


class PaddingViolation(CarlemanLabError):
    pass


# operators
class GridMismatch(CarlemanLabError):
    pass


class MissingCoefficients(CarlemanLabError):
    pass


# joperators
class InconsistentThresholds(CarlemanLabError):
    pass


class DeltaInfeasible(CarlemanLabError):
    pass


class QuadratureDivergence(CarlemanLabError):
    pass


class BranchCutOnSupport(CarlemanLabError):
    pass


# carleman
class ZeroRHS(CarlemanLabError):
    pass


# cgo
class OmegaInsideProjection(CarlemanLabError):
    pass


class SliceDegenerate(CarlemanLabError):
    pass


class PivotTooSmall(CarlemanLabError):
    pass


class CorrectionSolveFailed(CarlemanLabError):
    pass


# dnmap
class ZeroEigenvalue(CarlemanLabError):
    pass


class NonvanishingBoundaryPsi(CarlemanLabError):
    pass


class EmptyMask(CarlemanLabError):
    pass


# uniqueness
class InsufficientHPoints(CarlemanLabError):
    pass


class NotHolomorphic(CarlemanLabError):
    pass


class CurveDegenerate(CarlemanLabError):
    pass
