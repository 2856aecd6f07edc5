"""Localization metrics for attribution maps of detections.

``attribution_localization`` is the share of positive relevance that falls
inside the target mask. ``topk_intersection`` is the fraction of the ``k``
most relevant pixels lying inside the target mask.
"""
from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import BinaryMask, Grid, MetricSummary, rasterize, summarize, union_mask
from .detmetrics import Detection, GroundTruth, greedy_match
from .errors import BadK, InputError, NoPositiveRelevance, NothingToExplain, ShapeMismatch


@dataclass(frozen=True)
class AlResult:
    r_box: float
    r_tot: float
    value: float


@dataclass(frozen=True)
class TkiResult:
    k: int
    intersection_count: int
    value: float


class TargetMode(str, enum.Enum):
    MATCHED_BOX = "matched_box"
    UNION_OF_CLASS_BOXES = "union_of_class_boxes"


@dataclass(frozen=True)
class XaiEvalConfig:
    match_iou: float = 0.5
    score_threshold: float = 0.5
    k: int = 1000
    target_mode: TargetMode = TargetMode.MATCHED_BOX

    def __post_init__(self):
        object.__setattr__(self, "target_mode", TargetMode(self.target_mode))
        if not 0 < self.match_iou <= 1:
            raise InputError(f"match_iou must lie in (0, 1], got {self.match_iou}")
        if self.k < 1:
            raise BadK(f"k must be >= 1, got {self.k}")


def _check_shapes(grid: Grid, mask: BinaryMask):
    if grid.values.shape != mask.bits.shape:
        raise ShapeMismatch(f"grid {grid.values.shape} vs mask {mask.bits.shape}")


def attribution_localization(grid: Grid, mask: BinaryMask) -> AlResult:
    _check_shapes(grid, mask)
    pos = np.where(grid.values > 0, grid.values, 0.0)
    r_tot = float(pos.sum())
    if r_tot <= 0:
        raise NoPositiveRelevance("attribution map has no positive relevance")
    r_box = float(np.where(mask.bits, pos, 0.0).sum())
    return AlResult(r_box=r_box, r_tot=r_tot, value=min(1.0, r_box / r_tot))


def topk_mask(grid: Grid, k: int) -> BinaryMask:
    """The ``k`` largest values; ties go to the smaller row-major index."""
    n = grid.values.size
    if not 1 <= k <= n:
        raise BadK(f"k must lie in [1, {n}], got {k}")
    flat = grid.values.ravel()
    top = np.argsort(-flat, kind="stable")[:k]
    bits = np.zeros(n, dtype=bool)
    bits[top] = True
    return BinaryMask(bits.reshape(grid.values.shape))


def topk_intersection(grid: Grid, target: BinaryMask, k: int) -> TkiResult:
    _check_shapes(grid, target)
    top = topk_mask(grid, k)
    count = int(np.count_nonzero(top.bits & target.bits))
    return TkiResult(k=k, intersection_count=count, value=count / k)


@dataclass(frozen=True)
class ExplainedDetection:
    detection: Detection
    grid: Grid


@dataclass
class XaiReport:
    al: Optional[MetricSummary]
    tki: Optional[MetricSummary]
    per_class: dict = field(default_factory=dict)  # class -> {"al": summary, "tki": summary}
    evaluated: int = 0
    skipped_no_relevance: int = 0
    unmatched: int = 0
    below_threshold: int = 0
    values: list = field(default_factory=list)  # (image_id, index, class, al, tki)

    def to_dict(self) -> dict:
        return {
            "al": self.al.to_dict() if self.al else None,
            "tki": self.tki.to_dict() if self.tki else None,
            "per_class": {
                str(c): {m: s.to_dict() for m, s in v.items()} for c, v in sorted(self.per_class.items())
            },
            "evaluated": self.evaluated,
            "skipped_no_relevance": self.skipped_no_relevance,
            "unmatched": self.unmatched,
            "below_threshold": self.below_threshold,
        }


def evaluate_explanations(
    explained: Sequence[ExplainedDetection],
    gts: Sequence[GroundTruth],
    config: XaiEvalConfig = XaiEvalConfig(),
) -> XaiReport:
    """AL and TKI over the detections that match ground truth.

    Detections below the score threshold are dropped; the rest are greedily
    matched per (image, class). Each matched detection is scored against the
    matched GT box (or the union of its class boxes in the image). Maps
    without positive relevance are counted and left out of the summaries.
    """
    kept = [(i, e) for i, e in enumerate(explained) if e.detection.score >= config.score_threshold]
    below = len(explained) - len(kept)

    groups = defaultdict(list)
    for i, e in kept:
        groups[(e.detection.image_id, e.detection.category_id)].append(i)
    gt_groups = defaultdict(list)
    for g in gts:
        gt_groups[(g.image_id, g.category_id)].append(g)

    matched = {}
    for key, idx in groups.items():
        assign = greedy_match([explained[i].detection for i in idx], gt_groups.get(key, []), config.match_iou)
        for i, m in zip(idx, assign):
            if m is not None:
                matched[i] = gt_groups[key][m]
    if not matched:
        raise NothingToExplain("no detection matched ground truth")

    report = XaiReport(al=None, tki=None, below_threshold=below, unmatched=len(kept) - len(matched))
    al_cls, tki_cls = defaultdict(list), defaultdict(list)
    al_all, tki_all = [], []
    for i in sorted(matched, key=lambda i: (explained[i].detection.image_id, i)):
        det, grid = explained[i].detection, explained[i].grid
        gt = matched[i]
        if config.target_mode is TargetMode.MATCHED_BOX:
            target = rasterize(gt.box, grid.width, grid.height)
        else:
            target = union_mask(
                (g.box for g in gt_groups[(det.image_id, det.category_id)]), grid.width, grid.height
            )
        try:
            al = attribution_localization(grid, target).value
        except NoPositiveRelevance:
            report.skipped_no_relevance += 1
            continue
        k = min(config.k, grid.values.size)
        tki = topk_intersection(grid, target, k).value
        al_cls[det.category_id].append(al)
        tki_cls[det.category_id].append(tki)
        al_all.append(al)
        tki_all.append(tki)
        report.values.append((det.image_id, i, det.category_id, al, tki))

    report.evaluated = len(al_all)
    if not al_all:
        raise NothingToExplain("every matched detection lacks positive relevance")
    report.al = summarize(al_all)
    report.tki = summarize(tki_all)
    report.per_class = {c: {"al": summarize(al_cls[c]), "tki": summarize(tki_cls[c])} for c in sorted(al_cls)}
    return report
