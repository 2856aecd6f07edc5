"""Readers and writers for the interchange formats.

* annotations: COCO subset (images, annotations, categories)
* detections: COCO results array
* attribution grids: NPY v1.0, 2-D float arrays
* images: binary PPM (P6) and PGM (P5), 8 bit
* attribution manifests: JSON list tying detections to grid files

Every writer is byte-deterministic. Readers raise typed errors instead of
coercing bad input.
"""
from __future__ import annotations

import ast
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Box, Grid
from .detmetrics import Detection, GroundTruth
from .errors import FormatError, InputError, IntegrityError, ParseError


# --------------------------------------------------------------------- json


def _load_json(path):
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e.msg}", line=e.lineno, offset=e.colno) from None


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _require(record, key, kind, where):
    if not isinstance(record, dict) or key not in record:
        raise ParseError(f"{where}: missing field {key!r}")
    value = record[key]
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ParseError(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def _bbox(value, where) -> Box:
    if not isinstance(value, list) or len(value) != 4:
        raise ParseError(f"{where}: bbox must be a list of 4 numbers")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ParseError(f"{where}: bbox must be numeric")
    x, y, w, h = (float(v) for v in value)
    if not all(math.isfinite(v) for v in (x, y, w, h)):
        raise IntegrityError(f"{where}: non-finite bbox {value}")
    if w <= 0 or h <= 0:
        raise IntegrityError(f"{where}: bbox width/height must be positive, got {value}")
    return Box(x, y, w, h)


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    file_name: str


@dataclass(frozen=True)
class AnnotationRecord:
    id: int
    image_id: int
    category_id: int
    box: Box


@dataclass
class AnnotationSet:
    images: list[ImageRecord] = field(default_factory=list)
    annotations: list[AnnotationRecord] = field(default_factory=list)
    categories: list[tuple[int, str]] = field(default_factory=list)

    def ground_truths(self) -> list[GroundTruth]:
        return [GroundTruth(a.image_id, a.category_id, a.box) for a in self.annotations]

    def image(self, image_id: int) -> ImageRecord:
        for im in self.images:
            if im.id == image_id:
                return im
        raise IntegrityError(f"unknown image id {image_id}")

    def validate(self):
        def unique(ids, what):
            seen = set()
            for i in ids:
                if i in seen:
                    raise IntegrityError(f"duplicate {what} id {i}")
                seen.add(i)
            return seen

        img_ids = unique((im.id for im in self.images), "image")
        cat_ids = unique((c for c, _ in self.categories), "category")
        unique((a.id for a in self.annotations), "annotation")
        for im in self.images:
            if im.width < 1 or im.height < 1:
                raise IntegrityError(f"image {im.id} has non-positive size")
        for a in self.annotations:
            if a.image_id not in img_ids:
                raise IntegrityError(f"annotation {a.id} references missing image id {a.image_id}")
            if a.category_id not in cat_ids:
                raise IntegrityError(
                    f"annotation {a.id} references missing category id {a.category_id}"
                )
        return self


def read_annotations(path) -> AnnotationSet:
    doc = _load_json(path)
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise ParseError(f"{path}: missing list {key!r}")
    out = AnnotationSet()
    for n, r in enumerate(doc["images"]):
        where = f"images[{n}]"
        out.images.append(
            ImageRecord(
                _require(r, "id", int, where),
                _require(r, "width", int, where),
                _require(r, "height", int, where),
                _require(r, "file_name", str, where),
            )
        )
    for n, r in enumerate(doc["categories"]):
        where = f"categories[{n}]"
        cid = _require(r, "id", int, where)
        if cid < 1:
            raise IntegrityError(f"{where}: category id must be >= 1")
        out.categories.append((cid, _require(r, "name", str, where)))
    for n, r in enumerate(doc["annotations"]):
        where = f"annotations[{n}]"
        out.annotations.append(
            AnnotationRecord(
                _require(r, "id", int, where),
                _require(r, "image_id", int, where),
                _require(r, "category_id", int, where),
                _bbox(_require(r, "bbox", list, where), where),
            )
        )
    return out.validate()


def write_annotations(ann: AnnotationSet, path):
    ann.validate()
    _dump_json(
        {
            "images": [
                {"id": im.id, "width": im.width, "height": im.height, "file_name": im.file_name}
                for im in ann.images
            ],
            "annotations": [
                {
                    "id": a.id,
                    "image_id": a.image_id,
                    "category_id": a.category_id,
                    "bbox": a.box.as_list(),
                }
                for a in ann.annotations
            ],
            "categories": [{"id": c, "name": name} for c, name in ann.categories],
        },
        path,
    )


def read_detections(path) -> list[Detection]:
    doc = _load_json(path)
    if not isinstance(doc, list):
        raise ParseError(f"{path}: detections must be a JSON array")
    out = []
    for n, r in enumerate(doc):
        where = f"detections[{n}]"
        score = float(_require(r, "score", float, where))
        if not math.isfinite(score):
            raise IntegrityError(f"{where}: non-finite score")
        cid = _require(r, "category_id", int, where)
        if cid < 1:
            raise IntegrityError(f"{where}: category_id must be >= 1")
        out.append(
            Detection(
                _require(r, "image_id", int, where),
                cid,
                _bbox(_require(r, "bbox", list, where), where),
                score,
            )
        )
    return out


def write_detections(dets: Sequence[Detection], path):
    _dump_json(
        [
            {
                "image_id": d.image_id,
                "category_id": d.category_id,
                "bbox": d.box.as_list(),
                "score": float(d.score),
            }
            for d in dets
        ],
        path,
    )


@dataclass(frozen=True)
class ManifestEntry:
    detection_index: int
    image_id: int
    category_id: int
    grid_path: str


def read_manifest(path) -> list[ManifestEntry]:
    """Attribution manifest; ``grid_path`` is resolved against the manifest's directory."""
    doc = _load_json(path)
    if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
        raise ParseError(f"{path}: expected an object with an 'entries' list")
    out, seen = [], set()
    for n, r in enumerate(doc["entries"]):
        where = f"entries[{n}]"
        e = ManifestEntry(
            _require(r, "detection_index", int, where),
            _require(r, "image_id", int, where),
            _require(r, "category_id", int, where),
            _require(r, "grid_path", str, where),
        )
        if e.detection_index in seen:
            raise IntegrityError(f"duplicate detection_index {e.detection_index}")
        seen.add(e.detection_index)
        out.append(e)
    return out


def write_manifest(entries: Sequence[ManifestEntry], path):
    _dump_json(
        {
            "entries": [
                {
                    "detection_index": e.detection_index,
                    "image_id": e.image_id,
                    "category_id": e.category_id,
                    "grid_path": e.grid_path,
                }
                for e in entries
            ]
        },
        path,
    )


# ---------------------------------------------------------------------- npy

NPY_MAGIC = b"\x93NUMPY"
_NPY_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


def encode_grid(grid: Grid) -> bytes:
    h, w = grid.values.shape
    header = "{'descr': '<f8', 'fortran_order': False, 'shape': (%d, %d), }" % (h, w)
    # magic(6) + version(2) + u16 length(2) + header + '\n' padded to 64 bytes
    total = 10 + len(header) + 1
    header += " " * (-total % 64) + "\n"
    head = NPY_MAGIC + b"\x01\x00" + struct.pack("<H", len(header)) + header.encode("latin1")
    return head + np.ascontiguousarray(grid.values, dtype="<f8").tobytes()


def decode_grid(data: bytes, where="<bytes>") -> Grid:
    if len(data) < 10 or data[:6] != NPY_MAGIC:
        raise FormatError(f"{where}: not an NPY file (bad magic)")
    if data[6:8] != b"\x01\x00":
        raise FormatError(f"{where}: unsupported NPY version {data[6]}.{data[7]}")
    (hlen,) = struct.unpack("<H", data[8:10])
    if len(data) < 10 + hlen:
        raise FormatError(f"{where}: truncated header")
    try:
        header = ast.literal_eval(data[10 : 10 + hlen].decode("latin1"))
    except (ValueError, SyntaxError) as e:
        raise FormatError(f"{where}: unreadable header ({e})") from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise FormatError(f"{where}: header must declare descr, fortran_order, shape")
    dtype = _NPY_DTYPES.get(header["descr"])
    if dtype is None:
        raise FormatError(f"{where}: unsupported element type {header['descr']!r}")
    if header["fortran_order"] is not False:
        raise FormatError(f"{where}: fortran-ordered arrays are not supported")
    shape = header["shape"]
    if (
        not isinstance(shape, tuple)
        or len(shape) != 2
        or not all(isinstance(s, int) and s >= 1 for s in shape)
    ):
        raise FormatError(f"{where}: expected a 2-D shape, got {shape!r}")
    payload = data[10 + hlen :]
    need = shape[0] * shape[1] * dtype.itemsize
    if len(payload) != need:
        raise FormatError(f"{where}: payload has {len(payload)} bytes, expected {need}")
    values = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise IntegrityError(f"{where}: non-finite value in grid payload")
    return Grid(values)


def write_grid(grid: Grid, path):
    Path(path).write_bytes(encode_grid(grid))


def read_grid(path) -> Grid:
    return decode_grid(Path(path).read_bytes(), where=str(path))


# ------------------------------------------------------------------ ppm/pgm


def _header_tokens(data: bytes, count: int, where):
    """Split the first ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"{where}: truncated header")
        tokens.append(data[start:pos])
    if pos >= n or not data[pos : pos + 1].isspace():
        raise FormatError(f"{where}: header must end with one whitespace byte")
    return tokens, pos + 1


def decode_image(data: bytes, where="<bytes>") -> np.ndarray:
    """Decode P6/P5 bytes to ``uint8`` of shape (H, W, 3) or (H, W)."""
    magic = data[:2]
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"{where}: expected P6 or P5 magic, got {magic!r}")
    tokens, start = _header_tokens(data, 4, where)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{where}: non-integer header field") from None
    if w < 1 or h < 1:
        raise FormatError(f"{where}: non-positive image size {w}x{h}")
    if maxval != 255:
        raise FormatError(f"{where}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = data[start:]
    if len(payload) != need:
        raise FormatError(f"{where}: payload has {len(payload)} bytes, expected {need}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def encode_image(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise InputError(f"image must be uint8, got {pixels.dtype}")
    if pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    elif pixels.ndim == 2:
        magic = b"P5"
    else:
        raise InputError(f"image must be (H, W, 3) or (H, W), got {pixels.shape}")
    h, w = pixels.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels).tobytes()


def read_image(path) -> np.ndarray:
    return decode_image(Path(path).read_bytes(), where=str(path))


def write_image(pixels: np.ndarray, path):
    Path(path).write_bytes(encode_image(pixels))


def grid_to_gray(grid: Grid) -> np.ndarray:
    """Min-max scale a grid to 0..255; a constant grid maps to all zeros."""
    v = grid.values
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_heatmap(grid: Grid, path):
    write_image(grid_to_gray(grid), path)


def tensor_to_pixels(image: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] to (H, W, 3) uint8."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0).copy()


def pixels_to_tensor(pixels: np.ndarray) -> np.ndarray:
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[:, :, None], 3, axis=2)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0
