"""Hypercuboid user representations for next-item recommendation."""

from .errors import DataError, InvalidArgumentError, NumericFaultError
from .geometry import BoxSet, DistanceParams, Hypercuboid

__all__ = [
    "BoxSet",
    "DataError",
    "DistanceParams",
    "Hypercuboid",
    "InvalidArgumentError",
    "NumericFaultError",
]

__version__ = "0.1.0"
