"""Adversarial neural trip recommendation at desk scale."""

from antrip.errors import DataError, InfeasibleQueryError
from antrip.geo import CheckIn, Poi, TimeModel, Trip, TripQuery

__all__ = [
    "CheckIn",
    "DataError",
    "InfeasibleQueryError",
    "Poi",
    "TimeModel",
    "Trip",
    "TripQuery",
]
__version__ = "0.1.0"
