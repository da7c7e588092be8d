"""Self-paced weakly supervised training.

Each self-paced iteration ``t`` re-mines one latent box per image with the
current model (the global best detection across all classes), keeps the image
only if the winning class is one of its labels, ranks classes by how often they
win relative to how often they are labeled, keeps the ``round(r_t * C)``
easiest classes, keeps the ``min(round(r_t * N), |P|)`` most confident images
and trains on them for one epoch. ``r_t`` grows linearly from ``r_1``.

The engine (:func:`run_protocol`) is shared with the ablation variants, which
swap in a different miner, class-selection mode or image-selection mode.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from spwsd.data import ProposalBag, WeaklyLabeledDataset
from spwsd.detector import DetectorModel, drop_learning_rate, forward, save_checkpoint, train_step
from spwsd.geometry import Box
from spwsd.sampling import SamplerConfig, build_minibatch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PseudoLabel:
    image_id: str
    score: float
    box: Box
    label: int

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "score": self.score, "box": list(self.box.as_tuple()), "label": self.label}


@dataclass(frozen=True)
class TrainingEntry:
    """One image of ``T_t`` with its pseudo ground truth."""

    image_id: str
    score: float
    pseudo_gt: tuple  # of (label, Box)


@dataclass(frozen=True)
class ProtocolConfig:
    r1: float = 0.5
    iterations: int = 4
    extra_iteration: bool = False
    lr_drop_factor: float = 10.0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.r1 <= 1.0:
            raise ValueError("r1 must lie in (0, 1]")
        if self.iterations < 1:
            raise ValueError("iterations (M) must be >= 1")
        if self.lr_drop_factor <= 0:
            raise ValueError("lr_drop_factor must be positive")


@dataclass
class IterationRecord:
    """What happened at one self-paced iteration (one line of the run log)."""

    t: int
    r: float
    pool_size: int
    pool_filtered: int
    num_images: int
    n_t: int
    classes: list
    easiness: list
    sgd_iterations: int
    mean_loss: Optional[float]
    lr: float
    checkpoint: Optional[str] = None
    training_set: list = field(default_factory=list)
    skipped: bool = False

    def to_dict(self, include_training_set: bool = True) -> dict:
        out = asdict(self)
        if include_training_set:
            out["training_set"] = [
                {"image_id": e.image_id, "score": e.score,
                 "pseudo_gt": [[y, list(b.as_tuple())] for y, b in e.pseudo_gt]}
                for e in self.training_set
            ]
        else:
            out.pop("training_set")
        return out

    def pseudo_labels(self) -> list[PseudoLabel]:
        return [
            PseudoLabel(e.image_id, e.score, box, y) for e in self.training_set for y, box in e.pseudo_gt
        ]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def schedule(r1: float, iterations: int, extra_iteration: bool = False) -> list[float]:
    """The ratio sequence ``r_1..r_M`` (and ``r_{M+1}`` if requested), via ``r_{t+1} = r_t + (1 - r_1)/M``."""
    rs = [r1]
    for _ in range(iterations - 1 + int(extra_iteration)):
        rs.append(min(rs[-1] + (1.0 - r1) / iterations, 1.0))
    return rs


# ---------------------------------------------------------------------------
# latent boxes and selection


def select_latent_box(model: DetectorModel, bag: ProposalBag, use_regression: bool = True) -> tuple[float, Box, int]:
    """Highest-scoring detection over all proposals and object classes.

    Returns ``(score, box, class)``. Ties go to the lower class, then the lower
    proposal index.
    """
    grid = forward(model, bag, use_regression)
    flat = int(np.argmax(grid.scores.T))
    k, i = divmod(flat, bag.num_proposals)
    return float(grid.scores[i, k]), Box.from_array(grid.boxes[i, k]), k + 1


def competition_filter(latent: tuple[float, Box, int], labels, image_id: str = "") -> Optional[PseudoLabel]:
    """Accept the winning detection only if its class is one of the image labels."""
    score, box, label = latent
    if label not in labels:
        return None
    return PseudoLabel(image_id, score, box, label)


def class_easiness(pool: Sequence[PseudoLabel], label_counts: np.ndarray) -> np.ndarray:
    """``e(c)`` for c = 1..C: pool entries of class c divided by ``p_c`` (0 where ``p_c`` is 0)."""
    label_counts = np.asarray(label_counts)
    wins = np.zeros(len(label_counts), dtype=np.float64)
    for p in pool:
        wins[p.label - 1] += 1
    out = np.zeros_like(wins)
    has = label_counts > 0
    out[has] = wins[has] / label_counts[has]
    if np.any(wins[~has] > 0):
        raise ValueError("a class with no labeled sample won the competition")
    return out


def select_classes(easiness: np.ndarray, r: float, num_classes: int) -> list[int]:
    """The ``round(r * C)`` easiest classes (1-based, ties to the lower class index)."""
    k = round_half_up(r * num_classes)
    order = np.argsort(-np.asarray(easiness, dtype=np.float64), kind="stable")
    return sorted(int(c) + 1 for c in order[:k])


def random_classes(r: float, num_classes: int, rng: np.random.Generator) -> list[int]:
    k = round_half_up(r * num_classes)
    return sorted(int(c) + 1 for c in rng.choice(num_classes, size=k, replace=False))


def group_by_image(pool: Sequence[PseudoLabel]) -> list[TrainingEntry]:
    """Collapse pool entries into one entry per image scored by its best entry."""
    groups: dict[str, list[PseudoLabel]] = {}
    for p in pool:
        groups.setdefault(p.image_id, []).append(p)
    return [
        TrainingEntry(image_id, max(p.score for p in items), tuple((p.label, p.box) for p in items))
        for image_id, items in groups.items()
    ]


def select_images(pool: Sequence[PseudoLabel], r: float, n_total: int) -> list[TrainingEntry]:
    """The ``min(round(r * N), |P|)`` most confident images of the pool, best first.

    |P| counts images; an image with several entries is ranked by its highest
    score. Equal scores keep pool order.
    """
    entries = group_by_image(pool)
    n_t = min(round_half_up(r * n_total), len(entries))
    order = sorted(range(len(entries)), key=lambda j: -entries[j].score)
    return [entries[j] for j in order[:n_t]]


# ---------------------------------------------------------------------------
# engine

Miner = Callable[[DetectorModel, WeaklyLabeledDataset], list]


def sp_miner(use_regression: bool = True) -> Miner:
    def mine(model: DetectorModel, dataset: WeaklyLabeledDataset) -> list[PseudoLabel]:
        pool = []
        for bag in dataset.samples:
            accepted = competition_filter(select_latent_box(model, bag, use_regression), bag.labels, bag.image_id)
            if accepted is not None:
                pool.append(accepted)
        return pool

    return mine


def train_epoch(
    model: DetectorModel,
    dataset: WeaklyLabeledDataset,
    entries: Sequence[TrainingEntry],
    sampler: SamplerConfig,
    rng: np.random.Generator,
    iterations: Optional[int] = None,
) -> list[float]:
    """Mini-batch SGD over ``entries``, ``ceil(len / m)`` steps unless ``iterations`` is given.

    Each step draws ``m`` images uniformly with replacement.
    """
    m = sampler.images_per_batch
    if iterations is None:
        iterations = math.ceil(len(entries) / m)
    bags = [dataset.bag(e.image_id) for e in entries]
    losses = []
    for _ in range(iterations):
        picks = rng.integers(0, len(entries), size=m)
        batch = build_minibatch([(bags[j], entries[j].pseudo_gt) for j in picks], sampler, rng)
        losses.append(train_step(model, batch))
    return losses


def run_protocol(
    model: DetectorModel,
    dataset: WeaklyLabeledDataset,
    config: ProtocolConfig,
    *,
    miner: Miner,
    class_mode: str = "easiness",
    image_mode: str = "score",
    checkpoint_dir: Optional[str | Path] = None,
    on_iteration: Optional[Callable[[DetectorModel, IterationRecord], None]] = None,
) -> tuple[list[DetectorModel], list[IterationRecord]]:
    """Run M (or M+1) self-paced iterations starting from a copy of ``model``.

    Returns the models ``W_1..W_M`` and one record per iteration. With a
    ``checkpoint_dir``, ``W_0..W_M`` are written as ``W_<t>.ckpt``.
    """
    if class_mode not in ("easiness", "random", "all"):
        raise ValueError(f"unknown class_mode {class_mode!r}")
    if image_mode not in ("score", "all"):
        raise ValueError(f"unknown image_mode {image_mode!r}")
    model = model.copy()
    C, N = dataset.num_classes, len(dataset)
    label_counts = dataset.label_counts()
    class_rng, sgd_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, ckpt_dir / "W_0.ckpt")

    models, records = [], []
    for t, r in enumerate(schedule(config.r1, config.iterations, config.extra_iteration), start=1):
        pool = miner(model, dataset)
        easiness = class_easiness(pool, label_counts)
        if class_mode == "easiness":
            classes = select_classes(easiness, r, C)
        elif class_mode == "random":
            classes = random_classes(r, C, class_rng)
        else:
            classes = list(range(1, C + 1))
        keep = set(classes)
        filtered = [p for p in pool if p.label in keep]
        if image_mode == "score":
            entries = select_images(filtered, r, N)
        else:
            entries = group_by_image(filtered)

        record = IterationRecord(
            t=t, r=r, pool_size=len(pool), pool_filtered=len(group_by_image(filtered)),
            num_images=len(entries), n_t=len(entries), classes=classes,
            easiness=[float(e) for e in easiness], sgd_iterations=0, mean_loss=None,
            lr=model.lr, training_set=entries,
        )
        if entries:
            losses = train_epoch(model, dataset, entries, config.sampler, sgd_rng)
            record.sgd_iterations = len(losses)
            record.mean_loss = float(np.mean(losses))
        else:
            record.skipped = True
            logger.warning("iteration %d: empty training set, model unchanged", t)
        if t == 1:
            drop_learning_rate(model, config.lr_drop_factor)
        if ckpt_dir is not None:
            record.checkpoint = str(save_checkpoint(model, ckpt_dir / f"W_{t}.ckpt"))
        logger.info(
            "t=%d r=%.3f |P|=%d |T_t|=%d S=%s loss=%s", t, r, len(pool), len(entries), classes, record.mean_loss
        )
        models.append(model.copy())
        records.append(record)
        if on_iteration is not None:
            on_iteration(model, record)
    return models, records


def run_self_paced(
    model: DetectorModel,
    dataset: WeaklyLabeledDataset,
    config: ProtocolConfig,
    checkpoint_dir: Optional[str | Path] = None,
    on_iteration: Optional[Callable[[DetectorModel, IterationRecord], None]] = None,
) -> tuple[list[DetectorModel], list[IterationRecord]]:
    """The full self-paced protocol with inter-classifier competition and class selection."""
    return run_protocol(
        model, dataset, config, miner=sp_miner(True), class_mode="easiness", image_mode="score",
        checkpoint_dir=checkpoint_dir, on_iteration=on_iteration,
    )
