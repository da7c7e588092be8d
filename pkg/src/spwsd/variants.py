"""Initialization and ablation/relaxation variants of the self-paced protocol.

All variants run on :func:`spwsd.protocol.run_protocol`; they differ only in how
pseudo labels are mined each iteration and in which class/image selection
steps are active. :data:`VARIANTS` is the single source of truth for the flag
combinations.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from spwsd.data import ProposalBag, WeaklyLabeledDataset
from spwsd.detector import DetectionGrid, DetectorModel, forward
from spwsd.geometry import Box, iou_matrix, nms_indices
from spwsd.protocol import (
    IterationRecord,
    ProtocolConfig,
    PseudoLabel,
    TrainingEntry,
    run_protocol,
    sp_miner,
    train_epoch,
)
from spwsd.sampling import SamplerConfig

logger = logging.getLogger(__name__)

DEFAULT_NMS_THRESHOLD = 0.3


class Variant(str, enum.Enum):
    SP = "SP"
    MIL = "MIL"
    CURRICULUM = "CURRICULUM"
    SP_ALL_CLS = "SP_ALL_CLS"
    SP_RND_CLS = "SP_RND_CLS"
    NO_REG_TRAIN = "NO_REG_TRAIN"
    NO_REG_TRAIN_TEST = "NO_REG_TRAIN_TEST"
    SP_SIML = "SP_SIML"
    SP_MIML = "SP_MIML"

    @classmethod
    def parse(cls, name: str | "Variant") -> "Variant":
        if isinstance(name, Variant):
            return name
        key = str(name).strip().upper().replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown variant {name!r}; choose from {[v.value for v in cls]}") from None


@dataclass(frozen=True)
class VariantSpec:
    """Flag combination of one protocol variant.

    ``competition`` means the winner-in-labels test for global mining and the
    complement-class pruning for per-label mining. ``latent_source`` is
    ``predictions`` (regressed boxes), ``proposals`` (boxes of the bag) or
    ``static`` (the initialization pseudo labels, never re-mined).
    """

    variant: Variant
    competition: bool
    class_selection: str
    latent_source: str
    test_regression: bool
    per_label_mining: bool
    multi_instance_nms: bool
    image_selection: str

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["variant"] = self.variant.value
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "VariantSpec":
        data = dict(data)
        data["variant"] = Variant.parse(data["variant"])
        return cls(**data)


def _spec(v, comp, cls_sel, source, test_reg, per_label, nms, img_sel) -> VariantSpec:
    return VariantSpec(v, comp, cls_sel, source, test_reg, per_label, nms, img_sel)


VARIANTS: dict[Variant, VariantSpec] = {
    s.variant: s
    for s in (
        _spec(Variant.SP, True, "easiness", "predictions", True, False, False, "score"),
        _spec(Variant.MIL, False, "all", "predictions", True, True, False, "all"),
        _spec(Variant.CURRICULUM, False, "all", "static", True, True, False, "score"),
        _spec(Variant.SP_ALL_CLS, True, "all", "predictions", True, False, False, "score"),
        _spec(Variant.SP_RND_CLS, True, "random", "predictions", True, False, False, "score"),
        _spec(Variant.NO_REG_TRAIN, True, "easiness", "proposals", True, False, False, "score"),
        _spec(Variant.NO_REG_TRAIN_TEST, True, "easiness", "proposals", False, False, False, "score"),
        _spec(Variant.SP_SIML, True, "easiness", "predictions", True, True, False, "score"),
        _spec(Variant.SP_MIML, True, "easiness", "predictions", True, True, True, "score"),
    )
}


def variant_spec(name: str | Variant) -> VariantSpec:
    return VARIANTS[Variant.parse(name)]


def describe_variants() -> str:
    """Plain-text table of every variant's flags."""
    cols = ["variant", "competition", "class_selection", "latent_source", "test_regression",
            "per_label_mining", "multi_instance_nms", "image_selection"]
    rows = [[str(VARIANTS[v].to_dict()[c]) for c in cols] for v in Variant]
    widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*cols), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# per-label mining


class ComplementBest(NamedTuple):
    score: float
    box: Optional[Box]


def mil_mine(model: DetectorModel, bag: ProposalBag, label: int, use_regression: bool = True,
             grid: Optional[DetectionGrid] = None) -> tuple[float, Box]:
    """Best detection of one class only (ties to the lower proposal index)."""
    grid = forward(model, bag, use_regression) if grid is None else grid
    i = int(np.argmax(grid.scores[:, label - 1]))
    return float(grid.scores[i, label - 1]), Box.from_array(grid.boxes[i, label - 1])


def complement_best(grid: DetectionGrid, labels) -> ComplementBest:
    """Strongest detection among classes not in ``labels``; score -inf if there are none."""
    others = [c - 1 for c in range(1, grid.scores.shape[1] + 1) if c not in labels]
    if not others:
        return ComplementBest(-math.inf, None)
    sub = grid.scores[:, others]
    flat = int(np.argmax(sub.T))
    k, i = divmod(flat, sub.shape[0])
    return ComplementBest(float(sub[i, k]), Box.from_array(grid.boxes[i, others[k]]))


def siml_mine(model: DetectorModel, bag: ProposalBag, use_regression: bool = True) -> list[PseudoLabel]:
    """One box per label, kept only if it strictly beats the best non-label class."""
    grid = forward(model, bag, use_regression)
    s_o = complement_best(grid, bag.labels).score
    out = []
    for y in sorted(bag.labels):
        s, z = mil_mine(model, bag, y, grid=grid)
        if s > s_o:
            out.append(PseudoLabel(bag.image_id, s, z, y))
    return out


def miml_mine(model: DetectorModel, bag: ProposalBag, nms_threshold: float = DEFAULT_NMS_THRESHOLD,
              use_regression: bool = True) -> list[PseudoLabel]:
    """Per-class NMS survivors of every label that strictly beat the best non-label class."""
    grid = forward(model, bag, use_regression)
    s_o = complement_best(grid, bag.labels).score
    out = []
    for y in sorted(bag.labels):
        scores, boxes = grid.scores[:, y - 1], grid.boxes[:, y - 1]
        for i in nms_indices(boxes, scores, nms_threshold):
            if scores[i] > s_o:
                out.append(PseudoLabel(bag.image_id, float(scores[i]), Box.from_array(boxes[i]), y))
    return out


# ---------------------------------------------------------------------------
# initialization: classification scorer, static pseudo GT and W_0


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class BagClassifier:
    """Multi-label linear classifier trained on mean-pooled bag features.

    Stands in for the image-level classification network: it is fit with one
    binary logistic loss per class on image labels only, then applied to single
    boxes to score them.
    """

    def __init__(self, num_classes: int, feature_dim: int, l2: float = 1e-3):
        self.num_classes = num_classes
        self.weights = np.zeros((num_classes, feature_dim + 1))
        self.l2 = l2

    def fit(self, dataset: WeaklyLabeledDataset, steps: int = 500, lr: float = 0.5) -> "BagClassifier":
        x = np.array([bag.features.mean(axis=0) for bag in dataset.samples])
        x = np.hstack([x, np.ones((len(x), 1))])
        y = np.zeros((len(x), self.num_classes))
        for j, bag in enumerate(dataset.samples):
            for c in bag.labels:
                y[j, c - 1] = 1.0
        w = self.weights
        for _ in range(steps):
            p = _sigmoid(x @ w.T)
            grad = (p - y).T @ x / len(x)
            grad[:, :-1] += self.l2 * w[:, :-1]
            w = w - lr * grad
        self.weights = w
        return self

    def box_scores(self, bag: ProposalBag) -> np.ndarray:
        """``(n, C)`` per-box class scores in (0, 1)."""
        x = np.hstack([bag.features, np.ones((bag.num_proposals, 1))])
        return _sigmoid(x @ self.weights.T)


class OracleScorer:
    """Noisy ground-truth scorer for controlled studies.

    The score of box ``b`` for class ``y`` is the sigmoid of ``gain * IoU(b, best
    object of class y) + noise``; it reads evaluation annotations on purpose.
    """

    def __init__(self, dataset: WeaklyLabeledDataset, noise: float = 0.0, gain: float = 8.0, seed: int = 0):
        self.dataset = dataset
        self.noise = noise
        self.gain = gain
        self.rng = np.random.default_rng(seed)

    def box_scores(self, bag: ProposalBag) -> np.ndarray:
        C = self.dataset.num_classes
        raw = np.zeros((bag.num_proposals, C))
        objects = self.dataset.objects(bag.image_id)
        for c in range(1, C + 1):
            boxes = [o.box.as_tuple() for o in objects if o.label == c]
            if boxes:
                raw[:, c - 1] = iou_matrix(bag.proposals, np.array(boxes)).max(axis=1)
        raw = self.gain * (raw - 0.5)
        if self.noise:
            raw = raw + self.noise * self.rng.standard_normal(raw.shape)
        return _sigmoid(raw)


Scorer = Callable  # anything with box_scores(bag) -> (n, C)


def init_pseudo_gt(scorer, dataset: WeaklyLabeledDataset) -> dict[str, list[PseudoLabel]]:
    """For every image and every label, the proposal the scorer likes best for that label."""
    out = {}
    for bag in dataset.samples:
        scores = scorer.box_scores(bag)
        labels = []
        for y in sorted(bag.labels):
            i = int(np.argmax(scores[:, y - 1]))
            labels.append(PseudoLabel(bag.image_id, float(scores[i, y - 1]), bag.box(i), y))
        out[bag.image_id] = labels
    return out


def static_entries(pseudo_gt: Mapping[str, Sequence[PseudoLabel]], dataset: WeaklyLabeledDataset) -> list[TrainingEntry]:
    entries = []
    for bag in dataset.samples:
        items = pseudo_gt[bag.image_id]
        entries.append(TrainingEntry(bag.image_id, max(p.score for p in items), tuple((p.label, p.box) for p in items)))
    return entries


def train_init(
    model: DetectorModel,
    dataset: WeaklyLabeledDataset,
    pseudo_gt: Mapping[str, Sequence[PseudoLabel]],
    sampler: SamplerConfig,
    epochs: float = 2.0,
    seed: int = 0,
) -> tuple[DetectorModel, list[float]]:
    """Train a copy of ``model`` on the static pseudo GT of every image; returns ``W_0`` and losses."""
    model = model.copy()
    entries = static_entries(pseudo_gt, dataset)
    iterations = int(math.ceil(epochs * len(entries) / sampler.images_per_batch))
    rng = np.random.default_rng(seed)
    losses = train_epoch(model, dataset, entries, sampler, rng, iterations=iterations)
    return model, losses


def curriculum_order(init_labels: Mapping[str, Sequence[PseudoLabel]]) -> list[str]:
    """Image ids sorted by their highest initialization score (stable on ties)."""
    ids = list(init_labels)
    best = {i: max(p.score for p in init_labels[i]) for i in ids}
    return sorted(ids, key=lambda i: -best[i])


# ---------------------------------------------------------------------------
# dispatch


def make_miner(spec: VariantSpec, init_labels: Optional[Mapping[str, Sequence[PseudoLabel]]] = None,
               nms_threshold: float = DEFAULT_NMS_THRESHOLD):
    if spec.latent_source == "static":
        if init_labels is None:
            raise ValueError(f"{spec.variant.value} needs the initialization pseudo labels")
        # pool order follows the static curriculum order so prefixes are stable
        frozen = [p for image_id in curriculum_order(init_labels) for p in init_labels[image_id]]
        return lambda model, dataset: list(frozen)

    use_reg = spec.latent_source == "predictions"
    if not spec.per_label_mining:
        if not spec.competition:
            raise ValueError("global mining without competition is not a defined variant")
        return sp_miner(use_reg)

    def mine(model: DetectorModel, dataset: WeaklyLabeledDataset) -> list[PseudoLabel]:
        pool = []
        for bag in dataset.samples:
            if spec.multi_instance_nms:
                pool.extend(miml_mine(model, bag, nms_threshold, use_reg))
            elif spec.competition:
                pool.extend(siml_mine(model, bag, use_reg))
            else:
                grid = forward(model, bag, use_reg)
                for y in sorted(bag.labels):
                    s, z = mil_mine(model, bag, y, grid=grid)
                    pool.append(PseudoLabel(bag.image_id, s, z, y))
        return pool

    return mine


def run_variant(
    spec: VariantSpec | str | Variant,
    model: DetectorModel,
    dataset: WeaklyLabeledDataset,
    config: ProtocolConfig,
    *,
    init_labels: Optional[Mapping[str, Sequence[PseudoLabel]]] = None,
    nms_threshold: float = DEFAULT_NMS_THRESHOLD,
    checkpoint_dir: Optional[str | Path] = None,
    on_iteration: Optional[Callable[[DetectorModel, IterationRecord], None]] = None,
) -> tuple[list[DetectorModel], list[IterationRecord]]:
    """Run one protocol variant from ``model`` (= ``W_0``)."""
    if not isinstance(spec, VariantSpec):
        spec = variant_spec(spec)
    return run_protocol(
        model, dataset, config,
        miner=make_miner(spec, init_labels, nms_threshold),
        class_mode=spec.class_selection,
        image_mode=spec.image_selection,
        checkpoint_dir=checkpoint_dir,
        on_iteration=on_iteration,
    )
