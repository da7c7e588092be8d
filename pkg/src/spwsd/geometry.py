"""Axis-aligned box arithmetic.

Boxes are ``(x1, y1, x2, y2)`` in a continuous, unitless image plane. The
scalar API works on :class:`Box` values; the ``*_array`` helpers operate on
``(N, 4)`` float arrays and are what the training loop uses internally.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class InvalidBoxError(ValueError):
    """Raised when a box has non-positive width or height, or non-finite coordinates."""


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(coords)):
            raise InvalidBoxError(f"non-finite box coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBoxError(f"degenerate box {coords}: need x1 < x2 and y1 < y2")

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "Box":
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))

    def to_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


class RegressionTarget(NamedTuple):
    tx: float
    ty: float
    tw: float
    th: float


def validate_boxes(boxes: np.ndarray) -> np.ndarray:
    """Return ``boxes`` as a float64 ``(N, 4)`` array, raising on degenerate rows."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise InvalidBoxError(f"expected an (N, 4) box array, got shape {boxes.shape}")
    if not np.all(np.isfinite(boxes)):
        raise InvalidBoxError("non-finite box coordinates")
    bad = np.flatnonzero((boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1]))
    if bad.size:
        raise InvalidBoxError(f"degenerate box at row {bad[0]}: {boxes[bad[0]].tolist()}")
    return boxes


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0.0 when they are disjoint."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` arrays, shape ``(N, M)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS over arrays; returns kept indices in descending-score order.

    Equal scores are resolved in favour of the lower index.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(scores.size, dtype=bool)
    keep = []
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(idx)
        suppressed |= overlaps[idx] > iou_threshold
    return np.asarray(keep, dtype=np.int64)


def nms(detections: Sequence[tuple[float, Box]], iou_threshold: float = 0.3) -> list[tuple[float, Box]]:
    """Greedy non-maxima suppression over ``(score, Box)`` pairs.

    Repeatedly keeps the highest-scoring remaining detection and discards every
    other detection whose IoU with it exceeds ``iou_threshold``. The result is
    sorted by descending score.
    """
    if not detections:
        if not 0.0 <= iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
        return []
    scores = np.array([s for s, _ in detections], dtype=np.float64)
    boxes = np.array([b.as_tuple() for _, b in detections], dtype=np.float64)
    return [detections[i] for i in nms_indices(boxes, scores, iou_threshold)]


def _center_size(boxes: np.ndarray) -> tuple[np.ndarray, ...]:
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode_array(proposals: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Regression deltas mapping ``proposals`` onto ``targets`` (broadcasting, last axis 4)."""
    px, py, pw, ph = _center_size(np.asarray(proposals, dtype=np.float64))
    gx, gy, gw, gh = _center_size(np.asarray(targets, dtype=np.float64))
    return np.stack([(gx - px) / pw, (gy - py) / ph, np.log(gw / pw), np.log(gh / ph)], axis=-1)


def decode_array(deltas: np.ndarray, proposals: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_array`."""
    deltas = np.asarray(deltas, dtype=np.float64)
    px, py, pw, ph = _center_size(np.asarray(proposals, dtype=np.float64))
    cx = px + deltas[..., 0] * pw
    cy = py + deltas[..., 1] * ph
    w = pw * np.exp(deltas[..., 2])
    h = ph * np.exp(deltas[..., 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def encode_regression(proposal: Box, target: Box) -> RegressionTarget:
    return RegressionTarget(*encode_array(proposal.to_array(), target.to_array()).tolist())


def decode_regression(delta: RegressionTarget, proposal: Box) -> Box:
    return Box.from_array(decode_array(np.asarray(delta, dtype=np.float64), proposal.to_array()))


def hflip_array(boxes: np.ndarray, width: float) -> np.ndarray:
    """Reflect boxes about the vertical axis of a plane of the given width."""
    boxes = np.asarray(boxes, dtype=np.float64)
    out = boxes.copy()
    out[..., 0] = width - boxes[..., 2]
    out[..., 2] = width - boxes[..., 0]
    return out
