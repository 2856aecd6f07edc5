"""Synthetic single-object detection benchmark with controllable domain shift.

Each image holds one solid shape (disk, square, triangle or ring) of a random
color, size and position. Domains differ only in the background: flat
(``plain``), flat with sparse distractor marks (``mild_clutter``), or a mottled
background densely covered with distractors (``heavy_clutter``). Distractors
are thin line segments and speckle patches, so they never look like one of
the four object classes. Ground truth comes straight from the renderer.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .core import Box, resize
from .detmetrics import GroundTruth
from .errors import InputError, TooSmall

CLASS_NAMES = ("disk", "square", "triangle", "ring")


class Background(str, enum.Enum):
    PLAIN = "plain"
    MILD_CLUTTER = "mild_clutter"
    HEAVY_CLUTTER = "heavy_clutter"


# distractor count at clutter_density == 1
MAX_DISTRACTORS = {Background.PLAIN: 0, Background.MILD_CLUTTER: 4, Background.HEAVY_CLUTTER: 8}


@dataclass(frozen=True)
class DomainSpec:
    name: str
    background: Background = Background.PLAIN
    clutter_density: float = 0.0
    noise_sigma: float = 0.02
    image_size: tuple[int, int] = (64, 64)
    object_scale_range: tuple[float, float] = (0.3, 0.55)
    classes: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        object.__setattr__(self, "background", Background(self.background))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "object_scale_range", tuple(float(v) for v in self.object_scale_range))
        object.__setattr__(self, "classes", tuple(self.classes))
        if not 0.0 <= self.clutter_density <= 1.0:
            raise InputError(f"clutter_density must lie in [0, 1], got {self.clutter_density}")
        if self.noise_sigma < 0:
            raise InputError("noise_sigma must be >= 0")
        lo, hi = self.object_scale_range
        if not 0 < lo <= hi < 1:
            raise InputError(f"object_scale_range must satisfy 0 < min <= max < 1, got {self.object_scale_range}")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise InputError(f"image_size too small: {self.image_size}")
        if lo * min(h, w) < 6:
            raise InputError("smallest object would be under 6 pixels across")
        if self.classes != CLASS_NAMES:
            raise InputError(f"classes are fixed to {CLASS_NAMES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = self.background.value
        d["image_size"] = list(self.image_size)
        d["object_scale_range"] = list(self.object_scale_range)
        d["classes"] = list(self.classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(**d)


def default_domains(image_size=(64, 64)) -> dict[str, DomainSpec]:
    """Source, auxiliary and target domains of increasing clutter."""
    return {
        "source": DomainSpec("greenhouse", Background.PLAIN, 0.0, 0.02, image_size),
        "auxiliary": DomainSpec("experimental", Background.MILD_CLUTTER, 0.6, 0.04, image_size),
        "target": DomainSpec("seminatural", Background.HEAVY_CLUTTER, 1.0, 0.06, image_size),
    }


@dataclass
class DatasetBundle:
    pixels: np.ndarray  # (N, H, W, 3) uint8
    ground_truths: list[GroundTruth]
    domain: DomainSpec
    seed: int
    shape_masks: np.ndarray | None = field(default=None, repr=False)  # (N, H, W) drawn object pixels

    def __len__(self):
        return len(self.ground_truths)

    @property
    def image_ids(self) -> list[int]:
        return [g.image_id for g in self.ground_truths]

    def images(self) -> np.ndarray:
        """(N, 3, H, W) floats in [0, 1]."""
        return self.pixels.transpose(0, 3, 1, 2).astype(np.float64) / 255.0

    def labels(self) -> np.ndarray:
        """0-based class indices."""
        return np.array([g.category_id - 1 for g in self.ground_truths], dtype=np.int64)

    def subset(self, idx) -> "DatasetBundle":
        idx = list(idx)
        return DatasetBundle(
            pixels=self.pixels[idx],
            ground_truths=[self.ground_truths[i] for i in idx],
            domain=self.domain,
            seed=self.seed,
            shape_masks=None if self.shape_masks is None else self.shape_masks[idx],
        )


# ----------------------------------------------------------------- render


def _pixel_centers(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def shape_mask(kind: str, cx: float, cy: float, size: float, h: int, w: int) -> np.ndarray:
    """Pixels whose centers fall inside the shape of extent ``size`` centered at (cx, cy)."""
    px, py = _pixel_centers(h, w)
    dx, dy = px - cx, py - cy
    r = size / 2
    if kind == "disk":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        s = 0.85 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if kind == "triangle":
        return (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.5 * r) ** 2)
    raise InputError(f"unknown shape {kind!r}")


def _draw_line(canvas, rng, color, length):
    h, w, _ = canvas.shape
    x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
    ang = rng.uniform(0, math.pi)
    t = np.linspace(0.0, length, max(2, int(length * 2)))
    xs = np.clip((x0 + t * math.cos(ang)).astype(int), 0, w - 1)
    ys = np.clip((y0 + t * math.sin(ang)).astype(int), 0, h - 1)
    canvas[ys, xs] = color


def _draw_speckle(canvas, rng, color, size):
    h, w, _ = canvas.shape
    x0 = int(rng.integers(0, max(1, w - size)))
    y0 = int(rng.integers(0, max(1, h - size)))
    dots = rng.random((size, size)) < 0.5
    region = canvas[y0 : y0 + size, x0 : x0 + size]
    region[dots[: region.shape[0], : region.shape[1]]] = color


def _mottle(rng, h, w, amplitude):
    coarse = rng.uniform(-amplitude, amplitude, size=(3, 4, 4))
    return resize(coarse, h, w).transpose(1, 2, 0)


def render(domain: DomainSpec, seed: int, index: int):
    """Draw image ``index`` of the stream ``seed``.

    Returns (uint8 pixels (H, W, 3), category_id, tight Box, object mask).
    Every image uses its own RNG streams derived from (seed, index), and the
    shape, background, clutter and noise draws use separate child streams, so
    turning clutter off leaves everything else unchanged.
    """
    h, w = domain.image_size
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))
    shape_rng, bg_rng, clutter_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(4))

    bg = bg_rng.uniform(0.15, 0.85, size=3)
    canvas = np.broadcast_to(bg, (h, w, 3)).copy()
    if domain.background is Background.HEAVY_CLUTTER:
        canvas += _mottle(bg_rng, h, w, 0.2)

    n_distract = int(round(domain.clutter_density * MAX_DISTRACTORS[domain.background]))
    lo, hi = domain.object_scale_range
    for _ in range(n_distract):
        color = clutter_rng.uniform(0.0, 1.0, size=3)
        if clutter_rng.random() < 0.5:
            _draw_line(canvas, clutter_rng, color, clutter_rng.uniform(0.3, 0.7) * hi * min(h, w))
        else:
            _draw_speckle(canvas, clutter_rng, color, int(clutter_rng.integers(3, max(4, int(lo * min(h, w))))))

    cls = int(shape_rng.integers(len(CLASS_NAMES)))
    size = shape_rng.uniform(lo, hi) * min(h, w)
    cx = shape_rng.uniform(size / 2 + 1, w - size / 2 - 1)
    cy = shape_rng.uniform(size / 2 + 1, h - size / 2 - 1)
    while True:
        color = shape_rng.uniform(0.0, 1.0, size=3)
        if np.abs(color - bg).mean() >= 0.3:
            break
    mask = shape_mask(CLASS_NAMES[cls], cx, cy, size, h, w)
    canvas[mask] = color

    if domain.noise_sigma > 0:
        canvas += noise_rng.normal(0.0, domain.noise_sigma, size=canvas.shape)
    pixels = np.rint(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)

    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    box = Box(float(cols[0]), float(rows[0]), float(cols[-1] - cols[0] + 1), float(rows[-1] - rows[0] + 1))
    return pixels, cls + 1, box, mask


def generate(domain: DomainSpec, n: int, seed: int) -> DatasetBundle:
    if n < 1:
        raise InputError(f"n must be >= 1, got {n}")
    h, w = domain.image_size
    pixels = np.empty((n, h, w, 3), dtype=np.uint8)
    masks = np.empty((n, h, w), dtype=bool)
    gts = []
    for i in range(n):
        pixels[i], cat, box, masks[i] = render(domain, seed, i)
        gts.append(GroundTruth(i, cat, box))
    return DatasetBundle(pixels, gts, domain, int(seed), masks)


def split_sizes(n: int, ratios=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InputError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    val = int(math.floor(ratios[1] * n + 1e-9))
    test = int(math.floor(ratios[2] * n + 1e-9))
    return n - val - test, val, test


def split(bundle: DatasetBundle, ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Shuffled train/val/test partition; floor sizes, remainder to train."""
    n = len(bundle)
    if n < 5:
        raise TooSmall(f"need at least 5 images to split, got {n}")
    n_train, n_val, _ = split_sizes(n, ratios)
    perm = np.random.default_rng(seed).permutation(n)
    return (
        bundle.subset(sorted(perm[:n_train])),
        bundle.subset(sorted(perm[n_train : n_train + n_val])),
        bundle.subset(sorted(perm[n_train + n_val :])),
    )


# -------------------------------------------------------------- disk layout


def annotation_set(bundle: DatasetBundle) -> "io.AnnotationSet":
    h, w = bundle.domain.image_size
    return io.AnnotationSet(
        images=[io.ImageRecord(g.image_id, w, h, f"images/{g.image_id:06d}.ppm") for g in bundle.ground_truths],
        annotations=[
            io.AnnotationRecord(n + 1, g.image_id, g.category_id, g.box) for n, g in enumerate(bundle.ground_truths)
        ],
        categories=[(i + 1, name) for i, name in enumerate(CLASS_NAMES)],
    )


def save_bundle(bundle: DatasetBundle, out_dir, extra: dict | None = None):
    """Write images as P6 PPM, annotations as COCO-subset JSON, and a manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    ann = annotation_set(bundle)
    for im, px in zip(ann.images, bundle.pixels):
        io.write_image(px, out / im.file_name)
    io.write_annotations(ann, out / "annotations.json")
    manifest = {"domain": bundle.domain.to_dict(), "seed": bundle.seed, "count": len(bundle)}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_bundle(path) -> DatasetBundle:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise io.ParseError(f"{path / 'manifest.json'}: {e.msg}", e.lineno, e.colno) from None
    domain = DomainSpec.from_dict(manifest["domain"])
    ann = io.read_annotations(path / "annotations.json")
    gts_by_image = {a.image_id: a for a in ann.annotations}
    pixels, gts = [], []
    for im in ann.images:
        px = io.read_image(path / im.file_name)
        if px.ndim != 3 or px.shape[:2] != (im.height, im.width):
            raise io.IntegrityError(f"{im.file_name}: size does not match annotation record")
        a = gts_by_image.get(im.id)
        if a is None:
            raise io.IntegrityError(f"image {im.id} has no annotation")
        pixels.append(px)
        gts.append(GroundTruth(im.id, a.category_id, a.box))
    return DatasetBundle(np.stack(pixels), gts, domain, int(manifest["seed"]))


def concat(bundles: list[DatasetBundle]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack bundles into training arrays: images (N, 3, H, W), labels, normalized boxes."""
    images = np.concatenate([b.images() for b in bundles])
    labels = np.concatenate([b.labels() for b in bundles])
    boxes = np.concatenate([normalized_boxes(b) for b in bundles])
    return images, labels, boxes


def normalized_boxes(bundle: DatasetBundle) -> np.ndarray:
    """(N, 4) boxes as (cx, cy, w, h) relative to the image size."""
    h, w = bundle.domain.image_size
    return np.array(
        [
            [(g.box.x_min + g.box.width / 2) / w, (g.box.y_min + g.box.height / 2) / h, g.box.width / w, g.box.height / h]
            for g in bundle.ground_truths
        ]
    )
