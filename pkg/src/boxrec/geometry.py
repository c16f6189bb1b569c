"""Closed-form point-to-hypercuboid distances.

Everything here is plain numpy in float64 and independent of the autodiff
engine, so it doubles as the reference the differentiable path is checked
against. Item arguments may be a single vector of length ``d`` or a stack
of shape ``(..., d)``; distances come back with the trailing axis removed.
Smaller distances mean stronger preference.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError

MODES = ("single", "concentric", "independent")


@dataclass(frozen=True)
class Hypercuboid:
    center: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64)
        offset = np.asarray(self.offset, dtype=np.float64)
        if center.ndim != 1 or center.shape != offset.shape:
            raise InvalidArgumentError(
                f"center {center.shape} and offset {offset.shape} must be equal-length vectors"
            )
        if np.any(offset < 0):
            raise InvalidArgumentError("offset must be non-negative")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "offset", offset)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.offset

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.offset


@dataclass(frozen=True)
class DistanceParams:
    gamma: float = 0.5
    alpha: float = 200.0
    use_additional: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise InvalidArgumentError("gamma must be >= 0")
        if self.use_additional and not self.alpha > 100:
            raise InvalidArgumentError("alpha must exceed 100 when the additional distance is on")


@dataclass(frozen=True)
class BoxSet:
    mode: str
    boxes: Sequence[Hypercuboid] = field(default_factory=tuple)

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgumentError(f"unknown mode {self.mode!r}")
        boxes = tuple(self.boxes)
        if not boxes:
            raise InvalidArgumentError("a BoxSet needs at least one box")
        if self.mode == "single" and len(boxes) != 1:
            raise InvalidArgumentError("single mode holds exactly one box")
        if len({b.dim for b in boxes}) != 1:
            raise InvalidArgumentError("all boxes must share one dimension")
        if self.mode == "concentric":
            c0 = boxes[0].center
            if any(not np.array_equal(b.center, c0) for b in boxes[1:]):
                raise InvalidArgumentError("concentric boxes must share their center")
        object.__setattr__(self, "boxes", boxes)

    def __len__(self):
        return len(self.boxes)

    @classmethod
    def from_arrays(cls, mode, centers, offsets):
        """Build from ``(M, d)`` offsets and ``(M, d)`` or ``(1, d)`` centers."""
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        offsets = np.atleast_2d(np.asarray(offsets, dtype=np.float64))
        if centers.shape[0] == 1 and offsets.shape[0] > 1:
            centers = np.repeat(centers, offsets.shape[0], axis=0)
        return cls(mode, [Hypercuboid(c, f) for c, f in zip(centers, offsets)])


def _items(box: Hypercuboid, item) -> np.ndarray:
    item = np.asarray(item, dtype=np.float64)
    if item.ndim == 0 or item.shape[-1] != box.dim:
        raise InvalidArgumentError(
            f"item dimension {item.shape[-1:] or '()'} does not match box dimension {box.dim}"
        )
    return item


def nearest_surface_point(box: Hypercuboid, item) -> np.ndarray:
    """Closest point of the closed box to ``item`` (the item itself when inside)."""
    item = _items(box, item)
    return np.minimum(box.upper, np.maximum(box.lower, item))


def contains(box: Hypercuboid, item):
    item = _items(box, item)
    return np.all((box.lower <= item) & (item <= box.upper), axis=-1)


def outside_distance(box: Hypercuboid, item):
    item = _items(box, item)
    p = nearest_surface_point(box, item)
    return np.sum((p - item) ** 2, axis=-1)


def inside_distance(box: Hypercuboid, item):
    item = _items(box, item)
    p = nearest_surface_point(box, item)
    return np.sum((p - box.center) ** 2, axis=-1)


def _sigmoid(x):
    # exp(-x) overflows for very negative x; never reached here since x >= 0
    return 1.0 / (1.0 + np.exp(-x))


def additional_distance(box: Hypercuboid, item, alpha: float):
    """Offset-norm penalty switched on only outside the box.

    Zero on the closed box and strictly below ``||offset||^2`` everywhere,
    so any interior item beats any exterior one.
    """
    if not alpha > 0:
        raise InvalidArgumentError("alpha must be positive")
    out = outside_distance(box, item)
    return 2.0 * (_sigmoid(alpha * out) - 0.5) * float(np.sum(box.offset**2))


def composite_distance(box: Hypercuboid, item, params: DistanceParams = DistanceParams()):
    out = outside_distance(box, item)
    dist = out + params.gamma * inside_distance(box, item)
    if params.use_additional:
        dist = dist + additional_distance(box, item, params.alpha)
    return dist


def concentric_distance(boxes: BoxSet, item, params: DistanceParams = DistanceParams()):
    """Sum of outside distances plus gamma times the smallest inside distance."""
    if boxes.mode not in ("concentric", "single"):
        raise InvalidArgumentError(f"expected concentric boxes, got {boxes.mode}")
    outs = np.stack([outside_distance(b, item) for b in boxes.boxes])
    ins = np.stack([inside_distance(b, item) for b in boxes.boxes])
    dist = outs.sum(axis=0) + params.gamma * ins.min(axis=0)
    if params.use_additional:
        adds = np.stack([additional_distance(b, item, params.alpha) for b in boxes.boxes])
        dist = dist + adds.max(axis=0)
    return dist


def independent_distance(boxes: BoxSet, item, params: DistanceParams = DistanceParams()):
    """Minimum per-box composite distance (plus the largest additional term)."""
    if boxes.mode not in ("independent", "single"):
        raise InvalidArgumentError(f"expected independent boxes, got {boxes.mode}")
    base = DistanceParams(params.gamma, params.alpha, use_additional=False)
    per_box = np.stack([composite_distance(b, item, base) for b in boxes.boxes])
    dist = per_box.min(axis=0)
    if params.use_additional:
        adds = np.stack([additional_distance(b, item, params.alpha) for b in boxes.boxes])
        dist = dist + adds.max(axis=0)
    return dist


def boxset_distance(boxes: BoxSet, item, params: DistanceParams = DistanceParams()):
    """Dispatch on ``boxes.mode``."""
    if boxes.mode == "single":
        return composite_distance(boxes.boxes[0], item, params)
    if boxes.mode == "concentric":
        return concentric_distance(boxes, item, params)
    return independent_distance(boxes, item, params)
