"""Numerical laboratory for partial-data Carleman estimates and CGO solutions."""
from .carleman import CarlemanSweep, SweepReport, TestFunctionFamily, carleman_ratio, sweep
from .cgo import CGOSolution, cgo_solution, eikonal_pair
from .dnmap import DNMapEstimator, PotentialPair, dn_map, gauge_transform, restrict_partial
from .geometry import BallDomain, StarDomain, make_star_domain
from .uniqueness import (cauchy_extension, detect_difference, greens_identity_check, slice_integral,
                         term_scalings)

__all__ = [
    "BallDomain", "CGOSolution", "CarlemanSweep", "DNMapEstimator", "PotentialPair", "StarDomain",
    "SweepReport", "TestFunctionFamily", "carleman_ratio", "cauchy_extension", "cgo_solution",
    "detect_difference", "dn_map", "eikonal_pair", "gauge_transform", "greens_identity_check",
    "make_star_domain", "restrict_partial", "slice_integral", "sweep", "term_scalings",
]
