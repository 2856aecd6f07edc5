"""Boxes, pixel masks, attribution grids and sample summaries."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptySample, InputError


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in continuous pixel coordinates (COCO ``[x, y, w, h]``)."""

    x_min: float
    y_min: float
    width: float
    height: float

    def __post_init__(self):
        vals = tuple(float(v) for v in (self.x_min, self.y_min, self.width, self.height))
        for name, v in zip(("x_min", "y_min", "width", "height"), vals):
            object.__setattr__(self, name, v)
        if not all(math.isfinite(v) for v in vals):
            raise InputError(f"non-finite box {vals}")
        if self.width <= 0 or self.height <= 0:
            raise InputError(f"box must have positive extent, got {vals}")

    @property
    def x_max(self) -> float:
        return self.x_min + self.width

    @property
    def y_max(self) -> float:
        return self.y_min + self.height

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    @classmethod
    def from_xyxy(cls, x0, y0, x1, y1) -> "Box":
        return cls(float(x0), float(y0), float(x1 - x0), float(y1 - y0))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Boolean H x W mask; ``bits[r, c]`` is row ``r``, column ``c``."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise InputError(f"mask must be a non-empty 2-D array, got shape {bits.shape}")
        object.__setattr__(self, "bits", _frozen(bits.astype(bool)))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    def __or__(self, other: "BinaryMask") -> "BinaryMask":
        return BinaryMask(self.bits | other.bits)

    def __and__(self, other: "BinaryMask") -> "BinaryMask":
        return BinaryMask(self.bits & other.bits)


@dataclass(frozen=True, eq=False)
class Grid:
    """Finite real-valued H x W attribution map."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[0] < 1 or vals.shape[1] < 1:
            raise InputError(f"grid must be a non-empty 2-D array, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise InputError("grid contains non-finite values")
        object.__setattr__(self, "values", _frozen(vals))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(
            np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    variance: float
    std: float
    count: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "variance": self.variance, "std": self.std, "count": self.count}


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corner arithmetic as the intersection, so iou(a, a) == 1
    area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min)
    area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min)
    union = area_a + area_b - inter
    return min(1.0, inter / union)


def rasterize(box: Box, width: int, height: int) -> BinaryMask:
    """Mask of pixels whose centers fall inside the half-open box.

    Parts of the box outside the image are clipped away.
    """
    if width < 1 or height < 1:
        raise InputError("image dimensions must be >= 1")
    cx = np.arange(width) + 0.5
    cy = np.arange(height) + 0.5
    cols = (cx >= box.x_min) & (cx < box.x_max)
    rows = (cy >= box.y_min) & (cy < box.y_max)
    return BinaryMask(np.outer(rows, cols))


def union_mask(boxes: Iterable[Box], width: int, height: int) -> BinaryMask:
    if width < 1 or height < 1:
        raise InputError("image dimensions must be >= 1")
    bits = np.zeros((height, width), dtype=bool)
    for box in boxes:
        bits |= rasterize(box, width, height).bits
    return BinaryMask(bits)


def summarize(values: Sequence[float]) -> MetricSummary:
    """Mean and population variance (divide by n) of a non-empty sample."""
    x = np.asarray(list(values), dtype=np.float64)
    if x.size == 0:
        raise EmptySample("cannot summarize an empty sample")
    if not np.all(np.isfinite(x)):
        raise InputError("sample contains non-finite values")
    mean = math.fsum(x) / x.size
    var = math.fsum((x - mean) ** 2) / x.size
    return MetricSummary(mean=mean, variance=var, std=math.sqrt(var), count=int(x.size))


def resize_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Bilinear interpolation weights with half-pixel centers and edge clamping."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1 - frac
    m[np.arange(n_out), i1] += frac
    return m


def resize(image: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) or (H, W) array."""
    ry = resize_matrix(h, image.shape[-2])
    rx = resize_matrix(w, image.shape[-1])
    return ry @ image @ rx.T
