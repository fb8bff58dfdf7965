"""Pedestrian-detection evaluation: miss rate vs FPPI, MR^-2 and COCO-style AP.

Boxes here are pixel-space corner form ``(x1, y1, x2, y2)``. A ground truth
that fails the evaluation filter becomes an ignore region: detections that
land on it count neither as true nor as false positives.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numeric import DomainError

TP, FP, IGNORED = 1, 0, -1


def reasonable(min_height: float = 55.0) -> Callable[[dict], bool]:
    """Height and occlusion filter: tall enough, at most partially occluded."""

    def keep(attrs: dict) -> bool:
        return (
            attrs.get("height_px", np.inf) >= min_height
            and attrs.get("occlusion", "none") in ("none", "partial")
        )

    return keep


def keep_all(attrs: dict) -> bool:
    return True


def visible_in(modality: str) -> Callable[[dict], bool]:
    """Keep instances observable in ``modality`` ("V" or "T")."""

    def keep(attrs: dict) -> bool:
        return modality in attrs.get("visible_in", "VT")

    return keep


FILTERS = {
    "all": keep_all,
    "reasonable": reasonable(),
    "visible_V": visible_in("V"),
    "visible_T": visible_in("T"),
}


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    fppi_points: np.ndarray = field(default_factory=lambda: np.logspace(-2.0, 0.0, 9))
    filter: Callable[[dict], bool] = keep_all
    mr_floor: float = 1e-6

    def __post_init__(self):
        pts = np.asarray(self.fppi_points, dtype=np.float64)
        if np.any(np.diff(pts) <= 0) or pts[0] < 1e-2 - 1e-15 or pts[-1] > 1.0 + 1e-15:
            raise DomainError("fppi points must increase strictly within [1e-2, 1]")
        self.fppi_points = pts


@dataclass
class ImageEval:
    """One image's detections after matching."""

    scores: np.ndarray
    labels: np.ndarray  # TP / FP / IGNORED per detection, in input order
    gt_matched: np.ndarray
    num_gt: int  # ground truths that pass the filter


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (D, 4) and (G, 4) corner boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def score_order(scores) -> np.ndarray:
    """Descending score, lower index first among equal scores."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match_detections(boxes, scores, gt_boxes, gt_keep=None, iou_threshold: float = 0.5) -> ImageEval:
    """Greedy highest-score-first matching for one image.

    ``gt_keep`` flags ground truths that pass the filter (default: all).
    Each detection claims the best-overlapping unmatched kept ground truth;
    failing that, overlapping an ignore region makes it IGNORED.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    keep = np.ones(len(gt_boxes), bool) if gt_keep is None else np.asarray(gt_keep, bool)
    labels = np.full(len(boxes), FP, dtype=np.int64)
    matched = np.zeros(len(gt_boxes), dtype=bool)
    overlaps = box_iou(boxes, gt_boxes)
    for d in score_order(scores):
        ov = overlaps[d]
        cand = np.where(keep & ~matched & (ov >= iou_threshold), ov, -1.0)
        if len(cand) and cand.max() >= 0:
            g = int(np.argmax(cand))
            matched[g] = True
            labels[d] = TP
        elif len(ov) and np.any(~keep & (ov >= iou_threshold)):
            labels[d] = IGNORED
    return ImageEval(scores, labels, matched, int(keep.sum()))


@dataclass
class Curve:
    thresholds: np.ndarray
    fppi: np.ndarray
    miss_rate: np.ndarray

    def rows(self):
        return zip(self.thresholds.tolist(), self.fppi.tolist(), self.miss_rate.tolist())


def _cumulative(images: Sequence[ImageEval]):
    scores = np.concatenate([im.scores[im.labels != IGNORED] for im in images] or [np.zeros(0)])
    labels = np.concatenate([im.labels[im.labels != IGNORED] for im in images] or [np.zeros(0, int)])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    tp = np.cumsum(labels == TP)
    fp = np.cumsum(labels == FP)
    # one point per distinct score: equal scores enter the sweep together
    last = np.r_[scores[1:] != scores[:-1], True] if len(scores) else np.zeros(0, bool)
    return scores[last], tp[last], fp[last]


def fppi_mr_curve(images: Sequence[ImageEval]) -> Curve:
    """Miss rate and false positives per image while lowering the score threshold."""
    if not images:
        raise DomainError("need at least one image")
    n_gt = sum(im.num_gt for im in images)
    if n_gt == 0:
        raise DomainError("no ground truth passes the filter")
    thr, tp, fp = _cumulative(images)
    thr = np.r_[np.inf, thr]
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    return Curve(thr, fp / len(images), 1.0 - tp / n_gt)


def sample_miss_rates(curve: Curve, fppi_points) -> np.ndarray:
    """Miss rate at the largest achieved FPPI not exceeding each reference (1 if none)."""
    out = np.ones(len(fppi_points))
    for i, ref in enumerate(fppi_points):
        ok = np.nonzero(curve.fppi <= ref)[0]
        if len(ok):
            out[i] = curve.miss_rate[ok[-1]]
    return out


def log_average_miss_rate(curve: Curve, cfg: EvalConfig = None) -> float:
    cfg = cfg or EvalConfig()
    mr = np.clip(sample_miss_rates(curve, cfg.fppi_points), cfg.mr_floor, 1.0)
    return float(np.exp(np.mean(np.log(mr))))


def evaluate_images(dets, gts, cfg: EvalConfig = None, iou_threshold: float | None = None):
    """Match every image. ``dets``: per image ``(boxes, scores)``; ``gts``: per image
    ``(boxes, attrs_list)``."""
    cfg = cfg or EvalConfig()
    thr = cfg.iou_threshold if iou_threshold is None else iou_threshold
    out = []
    for (boxes, scores), (gboxes, attrs) in zip(dets, gts):
        keep = [bool(cfg.filter(a)) for a in attrs]
        out.append(match_detections(boxes, scores, gboxes, keep, thr))
    return out


def mr2(dets, gts, cfg: EvalConfig = None) -> tuple[float, Curve]:
    cfg = cfg or EvalConfig()
    curve = fppi_mr_curve(evaluate_images(dets, gts, cfg))
    return log_average_miss_rate(curve, cfg), curve


def interpolated_ap(images: Sequence[ImageEval], recall_points: int = 101) -> float:
    n_gt = sum(im.num_gt for im in images)
    if n_gt == 0:
        raise DomainError("no ground truth passes the filter")
    scores = np.concatenate([im.scores[im.labels != IGNORED] for im in images] or [np.zeros(0)])
    labels = np.concatenate([im.labels[im.labels != IGNORED] for im in images] or [np.zeros(0, int)])
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    labels = labels[order]
    tp = np.cumsum(labels == TP)
    fp = np.cumsum(labels == FP)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in np.linspace(0.0, 1.0, recall_points):
        idx = np.searchsorted(recall, r, side="left")
        total += envelope[idx] if idx < len(envelope) else 0.0
    return total / recall_points


AP_IOUS = np.round(np.arange(0.5, 0.951, 0.05), 2)


def average_precision(dets, gts, iou_list=AP_IOUS, cfg: EvalConfig = None) -> dict:
    """AP averaged over ``iou_list`` plus AP50 and AP75."""
    cfg = cfg or EvalConfig()
    per = {}
    for thr in list(iou_list) + [0.5, 0.75]:
        key = round(float(thr), 2)
        if key not in per:
            per[key] = float(interpolated_ap(evaluate_images(dets, gts, cfg, iou_threshold=key)))
    return {
        "AP": float(np.mean([per[round(float(t), 2)] for t in iou_list])),
        "AP50": per[0.5],
        "AP75": per[0.75],
    }


# -- file formats ---------------------------------------------------------


def write_detections(path, rows) -> None:
    """rows: iterable of (image_id, x1, y1, x2, y2, score) in pixels."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for image_id, x1, y1, x2, y2, s in rows:
            w.writerow([image_id, repr(float(x1)), repr(float(y1)), repr(float(x2)), repr(float(y2)), repr(float(s))])


def read_detections(path) -> dict:
    """Inverse of :func:`write_detections`; returns image_id -> (boxes, scores)."""
    grouped: dict = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            if len(row) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            image_id = row[0]
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            boxes, scores = grouped.setdefault(image_id, ([], []))
            boxes.append(vals[:4])
            scores.append(vals[4])
    return {
        k: (np.asarray(b, dtype=np.float64).reshape(-1, 4), np.asarray(s, dtype=np.float64))
        for k, (b, s) in grouped.items()
    }


def write_curve(path, curve: Curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fppi", "miss_rate"])
        for row in curve.rows():
            w.writerow(row)


def write_summary(path, metrics: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, v])
