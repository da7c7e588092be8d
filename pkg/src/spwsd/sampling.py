"""Image-centric mini-batch construction from pseudo ground truth."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from spwsd.data import ProposalBag
from spwsd.detector import MiniBatch
from spwsd.geometry import Box, encode_array, iou_matrix

logger = logging.getLogger(__name__)

PseudoGT = Sequence[tuple[int, Box]]

_warned: set = set()  # images already reported for the background fallback


@dataclass(frozen=True)
class SamplerConfig:
    images_per_batch: int = 2
    batch_size: int = 128
    fg_fraction: float = 0.25
    fg_iou_min: float = 0.5
    bg_iou_low: float = 0.1
    bg_iou_high: float = 0.5

    def __post_init__(self) -> None:
        if self.images_per_batch < 1:
            raise ValueError("images_per_batch must be >= 1")
        if self.batch_size < self.images_per_batch:
            raise ValueError("batch_size must be >= images_per_batch")
        if not 0.0 < self.fg_fraction < 1.0:
            raise ValueError("fg_fraction must lie in (0, 1)")
        if not 0.0 <= self.bg_iou_low < self.bg_iou_high <= self.fg_iou_min:
            raise ValueError("need 0 <= bg_iou_low < bg_iou_high <= fg_iou_min")

    def per_image_budget(self) -> list[int]:
        base, extra = divmod(self.batch_size, self.images_per_batch)
        return [base + (1 if i < extra else 0) for i in range(self.images_per_batch)]


def match_proposals(proposals: np.ndarray, gt_boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best-overlapping pseudo-GT index and its IoU for every proposal (ties -> lowest index)."""
    overlaps = iou_matrix(proposals, gt_boxes)
    best = np.argmax(overlaps, axis=1)
    return best, overlaps[np.arange(len(proposals)), best]


def build_minibatch(
    items: Sequence[tuple[ProposalBag, PseudoGT]],
    config: SamplerConfig,
    rng: np.random.Generator,
) -> MiniBatch:
    """Sample foreground and background boxes from ``config.images_per_batch`` images.

    Proposals whose best IoU with the image's pseudo-GT is at least
    ``fg_iou_min`` are foreground, labeled with the matched class and given a
    regression target towards the matched box. Proposals with best IoU in
    ``[bg_iou_low, bg_iou_high)`` are background. Each image contributes up to
    ``round(fg_fraction * budget)`` foreground boxes, sampled without
    replacement, and background fills the rest of its budget (with replacement
    when there are too few candidates). An image with no background candidate
    falls back to the range ``[0, fg_iou_min)`` and logs a warning.
    """
    if len(items) != config.images_per_batch:
        raise ValueError(f"expected {config.images_per_batch} images, got {len(items)}")
    feats, classes, targets, ids, fallback = [], [], [], [], []
    for (bag, pseudo_gt), budget in zip(items, config.per_image_budget()):
        if not pseudo_gt:
            raise ValueError(f"{bag.image_id}: no pseudo ground truth")
        gt_labels = np.array([y for y, _ in pseudo_gt], dtype=np.int64)
        gt_boxes = np.array([b.as_tuple() for _, b in pseudo_gt], dtype=np.float64)
        best, best_iou = match_proposals(bag.proposals, gt_boxes)

        fg_cand = np.flatnonzero(best_iou >= config.fg_iou_min)
        fg_quota = int(np.floor(config.fg_fraction * budget + 0.5))
        n_fg = min(fg_quota, fg_cand.size)
        fg = rng.choice(fg_cand, size=n_fg, replace=False) if n_fg else fg_cand[:0]

        bg_cand = np.flatnonzero((best_iou >= config.bg_iou_low) & (best_iou < config.bg_iou_high))
        if bg_cand.size == 0:
            bg_cand = np.flatnonzero(best_iou < config.fg_iou_min)
            fallback.append(bag.image_id)
            log = logger.debug if bag.image_id in _warned else logger.warning
            _warned.add(bag.image_id)
            log(
                "%s: no background in [%g, %g); widened to [0, %g) (%d candidates)",
                bag.image_id, config.bg_iou_low, config.bg_iou_high, config.fg_iou_min, bg_cand.size,
            )
        n_bg = budget - n_fg
        if bg_cand.size == 0 or n_bg <= 0:
            bg = bg_cand[:0]
        else:
            bg = rng.choice(bg_cand, size=n_bg, replace=bg_cand.size < n_bg)

        feats.append(bag.features[fg])
        classes.append(gt_labels[best[fg]])
        targets.append(encode_array(bag.proposals[fg], gt_boxes[best[fg]]))
        feats.append(bag.features[bg])
        classes.append(np.zeros(bg.size, dtype=np.int64))
        targets.append(np.full((bg.size, 4), np.nan))
        ids.extend([bag.image_id] * (fg.size + bg.size))

    return MiniBatch(
        features=np.concatenate(feats, axis=0),
        classes=np.concatenate(classes),
        targets=np.concatenate(targets, axis=0),
        image_ids=tuple(ids),
        bg_fallback=tuple(fallback),
    )
