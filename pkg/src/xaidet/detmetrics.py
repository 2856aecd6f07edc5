"""COCO-style average precision.

Per IoU threshold, detections of one class are ranked by score across all
images, greedily matched to ground truth image by image, and the area under
the interpolated precision/recall curve is taken as the mean precision over
evenly spaced recall samples. Class AP averages over thresholds and mean AP
averages over the classes that have ground truth.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Box, iou
from .errors import InputError, NoGroundTruth, NotEvaluable


@dataclass(frozen=True)
class Detection:
    image_id: int
    category_id: int
    box: Box
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise InputError(f"non-finite detection score {self.score}")
        if self.category_id < 1:
            raise InputError(f"category_id must be >= 1, got {self.category_id}")


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    category_id: int
    box: Box

    def __post_init__(self):
        if self.category_id < 1:
            raise InputError(f"category_id must be >= 1, got {self.category_id}")


def coco_thresholds() -> tuple[float, ...]:
    return tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())


@dataclass(frozen=True)
class ApConfig:
    iou_thresholds: tuple[float, ...] = field(default_factory=coco_thresholds)
    recall_samples: int = 101
    max_detections_per_image: int = 100

    def __post_init__(self):
        th = tuple(float(t) for t in self.iou_thresholds)
        object.__setattr__(self, "iou_thresholds", th)
        if not th:
            raise InputError("at least one IoU threshold is required")
        if any(not 0 < t <= 1 for t in th):
            raise InputError(f"IoU thresholds must lie in (0, 1]: {th}")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise InputError(f"IoU thresholds must be strictly increasing: {th}")
        if self.recall_samples < 2:
            raise InputError("recall_samples must be >= 2")
        if self.max_detections_per_image < 1:
            raise InputError("max_detections_per_image must be >= 1")


@dataclass(frozen=True)
class ApReport:
    class_ids: tuple[int, ...]
    thresholds: tuple[float, ...]
    cap: np.ndarray  # (classes, thresholds)
    class_ap: np.ndarray
    mean_ap: float

    @property
    def classes_evaluated(self) -> int:
        return len(self.class_ids)

    def to_dict(self) -> dict:
        return {
            "mean_ap": self.mean_ap,
            "iou_thresholds": list(self.thresholds),
            "classes": [
                {
                    "category_id": cid,
                    "ap": float(self.class_ap[i]),
                    "cap": [float(v) for v in self.cap[i]],
                }
                for i, cid in enumerate(self.class_ids)
            ],
        }


def greedy_match(
    detections: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float
) -> list[Optional[int]]:
    """Assign each detection the index of its matched GT, or ``None``.

    Detections are visited by descending score (stable on input order); each
    takes the still-unmatched GT with the highest IoU, provided that IoU
    reaches the threshold. Equal IoUs go to the lower GT index.
    """
    if not 0 < iou_threshold <= 1:
        raise InputError(f"IoU threshold must lie in (0, 1], got {iou_threshold}")
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    used = [False] * len(gts)
    out: list[Optional[int]] = [None] * len(detections)
    for d in order:
        best, best_iou = None, -1.0
        for g, gt in enumerate(gts):
            if used[g]:
                continue
            v = iou(detections[d].box, gt.box)
            if v >= iou_threshold and v > best_iou:
                best, best_iou = g, v
        if best is not None:
            used[best] = True
            out[d] = best
    return out


def _limit_per_image(detections: Sequence[Detection], max_det: int) -> list[Detection]:
    by_image = defaultdict(list)
    for i, d in enumerate(detections):
        by_image[d.image_id].append(i)
    keep = set()
    for idx in by_image.values():
        idx.sort(key=lambda i: -detections[i].score)
        keep.update(idx[:max_det])
    return [d for i, d in enumerate(detections) if i in keep]


def interpolated_ap(tp: np.ndarray, n_gt: int, recall_samples: int) -> float:
    """Area under the interpolated PR curve for a score-ranked TP/FP sequence."""
    if n_gt < 1:
        raise NotEvaluable("no ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp, dtype=np.int64)
    cfp = np.arange(1, tp.size + 1) - ctp
    precision = ctp / (ctp + cfp)
    # running max from the right: best precision at recall >= r
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= j/(R-1)  <=>  ctp*(R-1) >= j*n_gt, compared in integers
    scaled = ctp * (recall_samples - 1)
    idx = np.searchsorted(scaled, np.arange(recall_samples) * n_gt, side="left")
    ok = idx < scaled.size
    q = np.zeros(recall_samples)
    q[ok] = precision[idx[ok]]
    return float(q.mean())


def _class_tp_table(
    detections: Sequence[Detection], gts: Sequence[GroundTruth], class_id: int, config: ApConfig
) -> tuple[np.ndarray, int]:
    """TP flags of the class detections (score-ranked) for every threshold."""
    dets = [d for d in detections if d.category_id == class_id]
    gt_cls = [g for g in gts if g.category_id == class_id]
    if not gt_cls:
        raise NotEvaluable(f"class {class_id} has no ground truth")
    dets = _limit_per_image(dets, config.max_detections_per_image)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    rank = {d: r for r, d in enumerate(order)}

    det_by_img = defaultdict(list)
    for i, d in enumerate(dets):
        det_by_img[d.image_id].append(i)
    gt_by_img = defaultdict(list)
    for g in gt_cls:
        gt_by_img[g.image_id].append(g)

    tp = np.zeros((len(config.iou_thresholds), len(dets)), dtype=bool)
    for img, idx in det_by_img.items():
        local = [dets[i] for i in idx]
        for k, thr in enumerate(config.iou_thresholds):
            match = greedy_match(local, gt_by_img.get(img, []), thr)
            for i, m in zip(idx, match):
                tp[k, rank[i]] = m is not None
    return tp, len(gt_cls)


def cap_at_threshold(detections, gts, class_id: int, iou_threshold: float, config: ApConfig = ApConfig()) -> float:
    cfg = ApConfig((iou_threshold,), config.recall_samples, config.max_detections_per_image)
    tp, n_gt = _class_tp_table(detections, gts, class_id, cfg)
    return interpolated_ap(tp[0], n_gt, cfg.recall_samples)


def class_caps(detections, gts, class_id: int, config: ApConfig = ApConfig()) -> np.ndarray:
    tp, n_gt = _class_tp_table(detections, gts, class_id, config)
    return np.array([interpolated_ap(row, n_gt, config.recall_samples) for row in tp])


def class_ap(detections, gts, class_id: int, config: ApConfig = ApConfig()) -> float:
    return float(np.mean(class_caps(detections, gts, class_id, config)))


def mean_ap(detections: Sequence[Detection], gts: Sequence[GroundTruth], config: ApConfig = ApConfig()) -> ApReport:
    class_ids = tuple(sorted({g.category_id for g in gts}))
    if not class_ids:
        raise NoGroundTruth("no ground truth annotations")
    cap = np.stack([class_caps(detections, gts, c, config) for c in class_ids])
    per_class = cap.mean(axis=1)
    return ApReport(
        class_ids=class_ids,
        thresholds=config.iou_thresholds,
        cap=cap,
        class_ap=per_class,
        mean_ap=float(per_class.mean()),
    )
