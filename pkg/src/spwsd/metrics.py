"""Detection metrics: per-class AP / mAP, CorLoc and pseudo-GT precision."""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from spwsd.data import WeaklyLabeledDataset
from spwsd.detector import DetectorModel, forward
from spwsd.geometry import Box, iou_matrix, nms_indices

logger = logging.getLogger(__name__)


def match_detections(
    detections: Sequence[tuple[str, float, Box]],
    gt: Mapping[str, Sequence[Box]],
    iou_min: float = 0.5,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy matching in descending score order.

    Each detection claims the unmatched ground-truth box with the highest IoU,
    provided that IoU is at least ``iou_min``; otherwise it is a false positive.
    Returns ``(tp, fp, num_gt)`` with ``tp``/``fp`` in ranked order.
    """
    order = sorted(range(len(detections)), key=lambda j: -detections[j][1])
    gt_arr = {k: np.array([b.as_tuple() for b in v], dtype=np.float64).reshape(-1, 4) for k, v in gt.items()}
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gt_arr.items()}
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, j in enumerate(order):
        image_id, _, box = detections[j]
        boxes = gt_arr.get(image_id)
        if boxes is None or len(boxes) == 0:
            fp[rank] = 1
            continue
        ious = iou_matrix(box.to_array()[None, :], boxes)[0]
        ious[used[image_id]] = -1.0
        k = int(np.argmax(ious))
        if ious[k] >= iou_min:
            used[image_id][k] = True
            tp[rank] = 1
        else:
            fp[rank] = 1
    return tp, fp, sum(len(v) for v in gt_arr.values())


def ap_from_pr(recall: np.ndarray, precision: np.ndarray, use_11_point: bool = False) -> float:
    """Area under the interpolated precision/recall curve."""
    if use_11_point:
        ap = 0.0
        for thr in np.linspace(0.0, 1.0, 11):
            p = precision[recall >= thr]
            ap += (p.max() if p.size else 0.0) / 11.0
        return float(ap)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(
    detections: Sequence[tuple[str, float, Box]],
    gt: Mapping[str, Sequence[Box]],
    iou_min: float = 0.5,
    use_11_point: bool = False,
) -> float:
    """AP of one class. ``gt`` maps image ids to that class's boxes.

    Returns NaN (with a warning) when the class has no ground truth.
    """
    tp, fp, num_gt = match_detections(detections, gt, iou_min)
    if num_gt == 0:
        warnings.warn("class has no ground truth; AP undefined", RuntimeWarning, stacklevel=2)
        return math.nan
    if len(tp) == 0:
        return 0.0
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    return ap_from_pr(ctp / num_gt, ctp / (ctp + cfp), use_11_point)


def class_ground_truth(dataset: WeaklyLabeledDataset, label: int) -> dict[str, list[Box]]:
    return {
        bag.image_id: [o.box for o in dataset.objects(bag.image_id) if o.label == label]
        for bag in dataset.evaluation_samples()
    }


def detect(
    model: DetectorModel,
    dataset: WeaklyLabeledDataset,
    use_regression: bool = True,
    nms_threshold: float = 0.3,
) -> dict[int, list[tuple[str, float, Box]]]:
    """Per-class detections after per-class NMS over every evaluation image."""
    out: dict[int, list] = {c: [] for c in range(1, dataset.num_classes + 1)}
    for bag in dataset.evaluation_samples():
        grid = forward(model, bag, use_regression)
        for c in range(1, dataset.num_classes + 1):
            scores, boxes = grid.scores[:, c - 1], grid.boxes[:, c - 1]
            for i in nms_indices(boxes, scores, nms_threshold):
                out[c].append((bag.image_id, float(scores[i]), Box.from_array(boxes[i])))
    return out


def corloc(
    model: DetectorModel, dataset: WeaklyLabeledDataset, use_regression: bool = True
) -> tuple[np.ndarray, float]:
    """Per-class and mean CorLoc over every (evaluation image, label) pair.

    A pair is correct when the top class-``y`` detection overlaps a class-``y``
    object with IoU >= 0.5. Classes with no pair get NaN and are left out of
    the mean.
    """
    C = dataset.num_classes
    correct = np.zeros(C)
    total = np.zeros(C)
    for bag in dataset.evaluation_samples():
        grid = forward(model, bag, use_regression)
        objects = dataset.objects(bag.image_id)
        for y in bag.labels:
            i = int(np.argmax(grid.scores[:, y - 1]))
            total[y - 1] += 1
            boxes = [o.box.as_tuple() for o in objects if o.label == y]
            if boxes and iou_matrix(grid.boxes[i, y - 1][None, :], np.array(boxes)).max() >= 0.5:
                correct[y - 1] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(total > 0, correct / np.maximum(total, 1), np.nan)
    mean = float(np.nanmean(per_class)) if np.any(total > 0) else math.nan
    return per_class, mean


def pseudo_gt_precision(
    selected: Iterable, dataset: WeaklyLabeledDataset, iou_min: float = 0.5, include_mirrored: bool = False
) -> float:
    """Fraction of selected pseudo labels that hit a same-class object with IoU >= ``iou_min``.

    ``selected`` holds objects with ``image_id``, ``box`` and ``label``
    attributes. Mirrored images are skipped unless ``include_mirrored``.
    """
    hits = total = 0
    for p in selected:
        if not include_mirrored and dataset.bag(p.image_id).mirrored:
            continue
        total += 1
        boxes = [o.box.as_tuple() for o in dataset.objects(p.image_id) if o.label == p.label]
        if boxes and iou_matrix(p.box.to_array()[None, :], np.array(boxes)).max() >= iou_min:
            hits += 1
    return hits / total if total else math.nan


@dataclass
class MetricsReport:
    ap: list
    mean_ap: float
    corloc: list
    mean_corloc: float
    precision: Optional[float] = None
    num_images: int = 0
    num_detections: int = 0

    def to_dict(self) -> dict:
        return {
            "ap": self.ap, "mAP": self.mean_ap, "corloc": self.corloc, "mean_corloc": self.mean_corloc,
            "precision": self.precision, "num_images": self.num_images, "num_detections": self.num_detections,
        }


def evaluate(
    model: DetectorModel,
    dataset: WeaklyLabeledDataset,
    use_regression: bool = True,
    nms_threshold: float = 0.3,
    use_11_point: bool = False,
) -> MetricsReport:
    """AP per class (after NMS), mAP over classes with ground truth, and CorLoc."""
    dets = detect(model, dataset, use_regression, nms_threshold)
    aps = []
    for c in range(1, dataset.num_classes + 1):
        gt = class_ground_truth(dataset, c)
        if sum(len(v) for v in gt.values()) == 0:
            logger.warning("class %d has no ground truth in the evaluation set; excluded from mAP", c)
            aps.append(math.nan)
            continue
        aps.append(average_precision(dets[c], gt, use_11_point=use_11_point))
    valid = [a for a in aps if not math.isnan(a)]
    per_class_corloc, mean_corloc = corloc(model, dataset, use_regression)
    return MetricsReport(
        ap=aps,
        mean_ap=float(np.mean(valid)) if valid else math.nan,
        corloc=[float(v) for v in per_class_corloc],
        mean_corloc=mean_corloc,
        num_images=len(dataset.evaluation_samples()),
        num_detections=sum(len(v) for v in dets.values()),
    )


def ap_table_csv(class_names: Sequence[str], ap_by_model: Sequence[Sequence[float]]) -> str:
    """Per-class AP (%) with one column per model ``W_0..W_k`` plus a mean row."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["#", "category"] + [f"W{t}" for t in range(len(ap_by_model))])
    for c, name in enumerate(class_names):
        writer.writerow([c + 1, name] + [_pct(aps[c]) for aps in ap_by_model])
    means = [np.nanmean(aps) if np.any(~np.isnan(aps)) else math.nan for aps in map(np.asarray, ap_by_model)]
    writer.writerow(["", "mAP"] + [_pct(m) for m in means])
    return buf.getvalue()


def _pct(v: float) -> str:
    return "nan" if v is None or math.isnan(v) else f"{100.0 * v:.2f}"
