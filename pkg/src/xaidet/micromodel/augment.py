"""Geometric augmentation: flips, quarter-turn rotations and box-preserving crops."""
from __future__ import annotations

import numpy as np

from ..core import Box, resize

ORIENTATIONS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")


def hflip(image, box: Box):
    w = image.shape[2]
    return image[:, :, ::-1], Box(w - box.x_min - box.width, box.y_min, box.width, box.height)


def vflip(image, box: Box):
    h = image.shape[1]
    return image[:, ::-1, :], Box(box.x_min, h - box.y_min - box.height, box.width, box.height)


def rot90(image, box: Box):
    """Quarter turn counter-clockwise (``np.rot90`` on the spatial axes)."""
    w = image.shape[2]
    out = np.rot90(image, 1, axes=(1, 2))
    return out, Box(box.y_min, w - box.x_min - box.width, box.height, box.width)


def rotate(image, box: Box, quarter_turns: int):
    for _ in range(quarter_turns % 4):
        image, box = rot90(image, box)
    return image, box


def crop_resize(image, box: Box, x0: int, y0: int, x1: int, y1: int):
    """Crop ``[x0, x1) x [y0, y1)`` and scale it back to the original size."""
    _, h, w = image.shape
    sx = w / (x1 - x0)
    sy = h / (y1 - y0)
    out = resize(image[:, y0:y1, x0:x1], h, w)
    return out, Box((box.x_min - x0) * sx, (box.y_min - y0) * sy, box.width * sx, box.height * sy)


def random_crop(image, box: Box, rng: np.random.Generator, min_fraction: float = 0.6):
    """Crop that keeps the whole box, at least ``min_fraction`` of each side."""
    _, h, w = image.shape
    bx0, by0 = int(np.floor(box.x_min)), int(np.floor(box.y_min))
    bx1, by1 = int(np.ceil(box.x_max)), int(np.ceil(box.y_max))
    bx0, by0 = max(bx0, 0), max(by0, 0)
    bx1, by1 = min(bx1, w), min(by1, h)
    cw = int(rng.integers(max(bx1 - bx0, int(np.ceil(min_fraction * w))), w + 1))
    ch = int(rng.integers(max(by1 - by0, int(np.ceil(min_fraction * h))), h + 1))
    x0 = int(rng.integers(max(0, bx1 - cw), min(bx0, w - cw) + 1))
    y0 = int(rng.integers(max(0, by1 - ch), min(by0, h - ch) + 1))
    return crop_resize(image, box, x0, y0, x0 + cw, y0 + ch)


def augment(image: np.ndarray, gt_box: Box, rng: np.random.Generator, crop_prob: float = 0.5):
    """Random orientation (uniform over identity, two flips, three rotations),
    then with probability ``crop_prob`` a crop containing the box, resized back.

    Rotations by an odd number of quarter turns are only drawn for square images.
    """
    _, h, w = image.shape
    choices = ORIENTATIONS if h == w else ("identity", "hflip", "vflip", "rot180")
    op = choices[int(rng.integers(len(choices)))]
    if op == "hflip":
        image, gt_box = hflip(image, gt_box)
    elif op == "vflip":
        image, gt_box = vflip(image, gt_box)
    elif op.startswith("rot"):
        image, gt_box = rotate(image, gt_box, int(op[3:]) // 90)
    if rng.random() < crop_prob:
        image, gt_box = random_crop(image, gt_box, rng)
    return np.ascontiguousarray(image), gt_box
