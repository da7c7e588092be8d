"""Weakly-labeled proposal bags: dataset model, file format and synthetic generator.

A :class:`ProposalBag` is what training code sees of an image: its candidate
boxes, one feature vector per box and the image-level label set. Box-level
ground truth lives only on :class:`WeaklyLabeledDataset` (``ground_truth``) and
is consumed by the metrics module, never by the protocol engine.

File format (``.jsonl``), one JSON object per line::

    {"format": "spwsd.bags", "version": 1, "num_classes": C, "feature_dim": d}
    {"image_id": "img00000", "width": 100, "height": 100, "mirrored": false,
     "labels": [2, 5], "proposals": [[x1, y1, x2, y2], ...],
     "features": [[f_1, ..., f_d], ...], "eval_gt": [[class, x1, y1, x2, y2], ...]}

Reals are written with 9 significant digits. ``eval_gt`` is optional.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from spwsd.geometry import Box, InvalidBoxError, encode_array, hflip_array, iou_matrix, validate_boxes

logger = logging.getLogger(__name__)

FORMAT_NAME = "spwsd.bags"
FORMAT_VERSION = 1
_SIG_DIGITS = 9


class DatasetError(ValueError):
    """Invalid dataset content or infeasible generator configuration."""


class DatasetFormatError(DatasetError):
    """Malformed record in a dataset file; the message names the line and field."""

    def __init__(self, line: int, field_name: str, reason: str):
        super().__init__(f"line {line}: field {field_name!r}: {reason}")
        self.line = line
        self.field = field_name


class GroundTruthObject(NamedTuple):
    label: int
    box: Box


def quantize(values: np.ndarray | float) -> np.ndarray:
    """Round to the 9-significant-digit grid used by the file format."""
    arr = np.asarray(values, dtype=np.float64)
    flat = np.array([float(f"{v:.{_SIG_DIGITS}g}") for v in arr.ravel()], dtype=np.float64)
    return flat.reshape(arr.shape)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ProposalBag:
    """One training or test image as a bag of boxes with image-level labels."""

    image_id: str
    proposals: np.ndarray
    features: np.ndarray
    labels: frozenset
    width: float
    height: float
    mirrored: bool = False

    def __post_init__(self) -> None:
        proposals = validate_boxes(self.proposals)
        features = np.asarray(self.features, dtype=np.float64)
        if len(proposals) == 0:
            raise DatasetError(f"{self.image_id}: bag has no proposals")
        if features.ndim != 2 or features.shape[0] != proposals.shape[0]:
            raise DatasetError(
                f"{self.image_id}: {proposals.shape[0]} proposals but features have shape {features.shape}"
            )
        if not self.labels:
            raise DatasetError(f"{self.image_id}: empty label set")
        if not (self.width > 0 and self.height > 0):
            raise DatasetError(f"{self.image_id}: image plane must have positive size")
        object.__setattr__(self, "proposals", _frozen(proposals))
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "labels", frozenset(int(y) for y in self.labels))

    @property
    def num_proposals(self) -> int:
        return self.proposals.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def box(self, i: int) -> Box:
        return Box.from_array(self.proposals[i])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProposalBag):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.labels == other.labels
            and self.width == other.width
            and self.height == other.height
            and self.mirrored == other.mirrored
            and np.array_equal(self.proposals, other.proposals)
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class WeaklyLabeledDataset:
    """An immutable collection of bags plus evaluation-only box annotations.

    ``ground_truth`` maps image ids to their objects and may be empty (e.g. after
    :meth:`without_ground_truth`). Training code only ever reads ``samples``.
    """

    samples: tuple
    num_classes: int
    feature_dim: int
    ground_truth: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self) -> None:
        samples = tuple(self.samples)
        if self.num_classes < 2:
            raise DatasetError(f"need at least 2 classes, got {self.num_classes}")
        seen = set()
        for bag in samples:
            if bag.image_id in seen:
                raise DatasetError(f"duplicate image_id {bag.image_id!r}")
            seen.add(bag.image_id)
            if bag.feature_dim != self.feature_dim:
                raise DatasetError(
                    f"{bag.image_id}: feature dim {bag.feature_dim} != dataset dim {self.feature_dim}"
                )
            bad = [y for y in bag.labels if not 1 <= y <= self.num_classes]
            if bad:
                raise DatasetError(f"{bag.image_id}: labels {bad} outside 1..{self.num_classes}")
        gt = {}
        for image_id, objects in self.ground_truth.items():
            if image_id not in seen:
                raise DatasetError(f"ground truth for unknown image {image_id!r}")
            gt[image_id] = tuple(GroundTruthObject(int(o[0]), o[1]) for o in objects)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "ground_truth", gt)
        object.__setattr__(self, "_index", {bag.image_id: i for i, bag in enumerate(samples)})

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[ProposalBag]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> ProposalBag:
        return self.samples[i]

    def bag(self, image_id: str) -> ProposalBag:
        return self.samples[self._index[image_id]]

    def index_of(self, image_id: str) -> int:
        return self._index[image_id]

    def label_counts(self) -> np.ndarray:
        """``p_c`` for c = 1..C: number of samples whose label set contains c."""
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for bag in self.samples:
            for y in bag.labels:
                counts[y - 1] += 1
        return counts

    def evaluation_samples(self) -> list[ProposalBag]:
        """Samples that count towards metrics (mirrored copies are excluded)."""
        return [bag for bag in self.samples if not bag.mirrored]

    def objects(self, image_id: str) -> tuple:
        return self.ground_truth.get(image_id, ())

    def without_ground_truth(self) -> "WeaklyLabeledDataset":
        return WeaklyLabeledDataset(self.samples, self.num_classes, self.feature_dim, {})

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WeaklyLabeledDataset):
            return NotImplemented
        if (self.num_classes, self.feature_dim, len(self)) != (other.num_classes, other.feature_dim, len(other)):
            return False
        if any(a != b for a, b in zip(self.samples, other.samples)):
            return False
        return self.ground_truth == other.ground_truth

    __hash__ = None  # type: ignore[assignment]


# ---------------------------------------------------------------------------
# mirroring


def mirror(dataset: WeaklyLabeledDataset) -> WeaklyLabeledDataset:
    """Append a horizontally reflected copy of every sample.

    Features are treated as mirror-invariant appearance descriptors and copied
    unchanged. Copies get the id suffix ``_mirror`` and ``mirrored=True``.
    Reflected coordinates are re-quantized so copies survive a save/load
    round trip bit for bit.
    """
    copies = []
    gt = dict(dataset.ground_truth)
    for bag in dataset.samples:
        new_id = f"{bag.image_id}_mirror"
        copies.append(
            replace(
                bag,
                image_id=new_id,
                proposals=quantize(hflip_array(bag.proposals, bag.width)),
                mirrored=True,
            )
        )
        if bag.image_id in dataset.ground_truth:
            gt[new_id] = tuple(
                GroundTruthObject(o.label, Box.from_array(quantize(hflip_array(o.box.to_array(), bag.width))))
                for o in dataset.ground_truth[bag.image_id]
            )
    return WeaklyLabeledDataset(dataset.samples + tuple(copies), dataset.num_classes, dataset.feature_dim, gt)


# ---------------------------------------------------------------------------
# serialization


def _num(v: float) -> float | int:
    q = float(f"{v:.{_SIG_DIGITS}g}")
    return int(q) if q.is_integer() and abs(q) < 1e15 else q


def _record(bag: ProposalBag, objects: Sequence[GroundTruthObject] | None) -> dict:
    rec = {
        "image_id": bag.image_id,
        "width": _num(bag.width),
        "height": _num(bag.height),
        "mirrored": bag.mirrored,
        "labels": sorted(bag.labels),
        "proposals": [[_num(v) for v in row] for row in bag.proposals],
        "features": [[_num(v) for v in row] for row in bag.features],
    }
    if objects is not None:
        rec["eval_gt"] = [[o.label] + [_num(v) for v in o.box.as_tuple()] for o in objects]
    return rec


def dumps(dataset: WeaklyLabeledDataset) -> str:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "num_classes": dataset.num_classes,
        "feature_dim": dataset.feature_dim,
    }
    lines = [json.dumps(header, separators=(",", ":"))]
    for bag in dataset.samples:
        objects = dataset.ground_truth.get(bag.image_id)
        lines.append(json.dumps(_record(bag, objects), separators=(",", ":")))
    return "\n".join(lines) + "\n"


def save(dataset: WeaklyLabeledDataset, path: str | Path) -> None:
    Path(path).write_text(dumps(dataset), encoding="utf-8")


def _require(rec: dict, name: str, line: int):
    if name not in rec:
        raise DatasetFormatError(line, name, "missing")
    return rec[name]


def _real_matrix(value, line: int, name: str, width: Optional[int] = None) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(line, name, f"not a numeric matrix ({exc})") from None
    if arr.ndim != 2 or (width is not None and arr.shape[1] != width):
        raise DatasetFormatError(line, name, f"expected rows of length {width}, got shape {arr.shape}")
    return arr


def _parse_record(rec: dict, line: int, feature_dim: int) -> tuple[ProposalBag, Optional[tuple]]:
    if not isinstance(rec, dict):
        raise DatasetFormatError(line, "<record>", "not a JSON object")
    image_id = _require(rec, "image_id", line)
    labels = _require(rec, "labels", line)
    if not isinstance(labels, list) or not labels or not all(isinstance(y, int) for y in labels):
        raise DatasetFormatError(line, "labels", "expected a non-empty list of integers")
    proposals = _real_matrix(_require(rec, "proposals", line), line, "proposals", 4)
    features = _real_matrix(_require(rec, "features", line), line, "features", feature_dim)
    width = _require(rec, "width", line)
    height = _require(rec, "height", line)
    try:
        bag = ProposalBag(
            image_id=str(image_id),
            proposals=proposals,
            features=features,
            labels=frozenset(labels),
            width=float(width),
            height=float(height),
            mirrored=bool(rec.get("mirrored", False)),
        )
    except InvalidBoxError as exc:
        raise DatasetFormatError(line, "proposals", str(exc)) from None
    except DatasetError as exc:
        raise DatasetFormatError(line, "<record>", str(exc)) from None
    objects = None
    if "eval_gt" in rec:
        gt = _real_matrix(rec["eval_gt"], line, "eval_gt", 5) if rec["eval_gt"] else np.zeros((0, 5))
        try:
            objects = tuple(GroundTruthObject(int(row[0]), Box.from_array(row[1:])) for row in gt)
        except InvalidBoxError as exc:
            raise DatasetFormatError(line, "eval_gt", str(exc)) from None
    return bag, objects


def loads(text: str) -> WeaklyLabeledDataset:
    lines = [(n, ln) for n, ln in enumerate(text.splitlines(), start=1) if ln.strip()]
    if not lines:
        raise DatasetFormatError(1, "format", "empty file")
    parsed = []
    for n, ln in lines:
        try:
            parsed.append((n, json.loads(ln)))
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(n, "<record>", f"invalid JSON ({exc.msg})") from None
    n0, header = parsed[0]
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DatasetFormatError(n0, "format", f"expected {FORMAT_NAME!r}")
    if _require(header, "version", n0) != FORMAT_VERSION:
        raise DatasetFormatError(n0, "version", f"unsupported version {header['version']!r}")
    num_classes = int(_require(header, "num_classes", n0))
    feature_dim = int(_require(header, "feature_dim", n0))
    samples, gt = [], {}
    for n, rec in parsed[1:]:
        bag, objects = _parse_record(rec, n, feature_dim)
        samples.append(bag)
        if objects is not None:
            gt[bag.image_id] = objects
    return WeaklyLabeledDataset(tuple(samples), num_classes, feature_dim, gt)


def load(path: str | Path) -> WeaklyLabeledDataset:
    return loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic weakly-labeled benchmark.

    ``signal`` is the strength of the class-prototype direction carried by a
    proposal that fully covers an object (it is scaled by the proposal's IoU
    with its best-overlapping object); ``noise`` is the isotropic feature noise.
    ``offset_signal`` adds a vertical-offset/scale code so that box regression
    is learnable from features. ``recall_fraction`` is the fraction of objects
    guaranteed at least one proposal with IoU >= 0.5. ``label_noise`` is the
    probability that an image receives one spurious label with no object.
    The carried signal grows as ``IoU ** iou_exponent`` (the offset code as
    ``IoU ** offset_iou_exponent``, by default the same exponent); each object also draws
    a visibility factor uniformly from ``[min_visibility, 1]`` that scales the
    signal of every proposal matched to it (hard, weakly visible objects).
    """

    num_images: int = 200
    num_test_images: int = 200
    num_classes: int = 6
    feature_dim: int = 16
    min_objects: int = 1
    max_objects: int = 3
    proposals_per_image: int = 40
    fg_proposals_per_object: int = 8
    jitter: float = 0.25
    signal: float = 3.0
    noise: float = 1.0
    offset_signal: float = 1.0
    label_noise: float = 0.0
    recall_fraction: float = 0.9
    iou_exponent: float = 1.0
    offset_iou_exponent: Optional[float] = None
    min_visibility: float = 1.0
    class_weights: Optional[tuple] = None
    image_width: float = 100.0
    image_height: float = 100.0
    min_object_size: float = 0.15
    max_object_size: float = 0.6
    seed: int = 0

    def validate(self) -> None:
        positive = ("num_images", "num_classes", "feature_dim", "min_objects", "max_objects",
                    "proposals_per_image", "fg_proposals_per_object")
        for name in positive:
            if getattr(self, name) <= 0:
                raise DatasetError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_test_images < 0:
            raise DatasetError("num_test_images must be >= 0")
        if self.num_classes < 2:
            raise DatasetError("num_classes must be >= 2")
        if self.min_objects > self.max_objects:
            raise DatasetError("min_objects > max_objects")
        if self.max_objects * self.fg_proposals_per_object > self.proposals_per_image:
            raise DatasetError(
                f"infeasible: {self.max_objects} objects x {self.fg_proposals_per_object} "
                f"jittered proposals exceed proposals_per_image={self.proposals_per_image}"
            )
        for name in ("label_noise", "recall_fraction", "min_visibility"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DatasetError(f"{name} must lie in [0, 1]")
        for name in ("signal", "noise", "offset_signal", "jitter", "iou_exponent", "offset_iou_exponent"):
            if getattr(self, name) is not None and getattr(self, name) < 0:
                raise DatasetError(f"{name} must be >= 0")
        if not 0 < self.min_object_size <= self.max_object_size <= 1:
            raise DatasetError("object sizes must satisfy 0 < min <= max <= 1")
        if self.image_width <= 0 or self.image_height <= 0:
            raise DatasetError("image plane must have positive size")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if w.shape != (self.num_classes,) or np.any(w < 0) or w.sum() <= 0:
                raise DatasetError("class_weights must be C non-negative numbers with positive sum")

    @classmethod
    def from_dict(cls, data: Mapping) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DatasetError(f"unknown synthetic config keys: {sorted(unknown)}")
        data = dict(data)
        if data.get("class_weights") is not None:
            data["class_weights"] = tuple(float(w) for w in data["class_weights"])
        return cls(**data)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        if out["class_weights"] is not None:
            out["class_weights"] = list(out["class_weights"])
        return out


class _World:
    """Shared appearance model (class prototypes and offset code) for one seed."""

    def __init__(self, config: SyntheticConfig, rng: np.random.Generator):
        c, d = config.num_classes, config.feature_dim
        n_dirs = c + 3
        raw = rng.standard_normal((d, max(n_dirs, d)))
        if d >= n_dirs:
            q, _ = np.linalg.qr(raw[:, :n_dirs])
            self.prototypes = q[:, :c].T
            self.offset_code = q[:, c:n_dirs]
        else:
            cols = raw[:, :n_dirs] / np.linalg.norm(raw[:, :n_dirs], axis=0)
            if d >= c:
                q, _ = np.linalg.qr(raw[:, :c])
                cols[:, :c] = q
            self.prototypes = cols[:, :c].T
            self.offset_code = cols[:, c:n_dirs]
        if config.class_weights is None:
            self.class_p = np.full(c, 1.0 / c)
        else:
            w = np.asarray(config.class_weights, dtype=np.float64)
            self.class_p = w / w.sum()


def _clip_boxes(boxes: np.ndarray, width: float, height: float, min_side: float) -> np.ndarray:
    out = boxes.copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0.0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0.0, height)
    # restore a minimum extent after clipping, staying inside the plane
    for lo, hi, limit in ((0, 2, width), (1, 3, height)):
        short = out[:, hi] - out[:, lo] < min_side
        out[short, hi] = np.minimum(out[short, lo] + min_side, limit)
        out[short, lo] = out[short, hi] - min_side
    return out


def _jitter(obj: np.ndarray, n: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    w, h = obj[2] - obj[0], obj[3] - obj[1]
    cx, cy = obj[0] + w / 2, obj[1] + h / 2
    dx, dy = rng.normal(0.0, scale, n) * w, rng.normal(0.0, scale, n) * h
    sw, sh = np.exp(rng.normal(0.0, scale, n)), np.exp(rng.normal(0.0, scale, n))
    nw, nh = w * sw, h * sh
    return np.stack([cx + dx - nw / 2, cy + dy - nh / 2, cx + dx + nw / 2, cy + dy + nh / 2], axis=1)


def _sample_image(
    config: SyntheticConfig, world: _World, rng: np.random.Generator, image_id: str
) -> tuple[ProposalBag, tuple]:
    W, H = config.image_width, config.image_height
    min_side = 0.02 * min(W, H)
    k = int(rng.integers(config.min_objects, config.max_objects + 1))
    classes = rng.choice(config.num_classes, size=k, p=world.class_p) + 1
    sizes = rng.uniform(config.min_object_size, config.max_object_size, size=(k, 2)) * np.array([W, H])
    x1 = rng.uniform(0.0, 1.0, k) * (W - sizes[:, 0])
    y1 = rng.uniform(0.0, 1.0, k) * (H - sizes[:, 1])
    objects = quantize(np.stack([x1, y1, x1 + sizes[:, 0], y1 + sizes[:, 1]], axis=1))
    visibility = rng.uniform(config.min_visibility, 1.0, k)

    labels = set(int(c) for c in classes)
    if config.label_noise > 0 and rng.random() < config.label_noise:
        absent = [c for c in range(1, config.num_classes + 1) if c not in labels]
        if absent:
            labels.add(int(rng.choice(absent)))

    parts = []
    for j in range(k):
        jit = _clip_boxes(_jitter(objects[j], config.fg_proposals_per_object, config.jitter, rng), W, H, min_side)
        if rng.random() < config.recall_fraction:
            tries = 0
            while iou_matrix(jit, objects[j : j + 1]).max() < 0.5 and tries < 100:
                jit[0] = _clip_boxes(_jitter(objects[j], 1, config.jitter, rng), W, H, min_side)[0]
                tries += 1
            if iou_matrix(jit, objects[j : j + 1]).max() < 0.5:
                jit[0] = objects[j]
        parts.append(jit)
    n_bg = config.proposals_per_image - sum(len(p) for p in parts)
    if n_bg > 0:
        bw = rng.uniform(0.1, 0.7, n_bg) * W
        bh = rng.uniform(0.1, 0.7, n_bg) * H
        bx = rng.uniform(0.0, 1.0, n_bg) * (W - bw)
        by = rng.uniform(0.0, 1.0, n_bg) * (H - bh)
        parts.append(np.stack([bx, by, bx + bw, by + bh], axis=1))
    proposals = np.concatenate(parts, axis=0)
    proposals = quantize(proposals[rng.permutation(len(proposals))])

    overlaps = iou_matrix(proposals, objects)
    best = np.argmax(overlaps, axis=1)
    best_iou = overlaps[np.arange(len(proposals)), best]
    deltas = encode_array(proposals, objects[best])
    # the offset code carries only mirror-invariant components (ty, tw, th)
    code = deltas[:, 1:] @ world.offset_code.T
    strength = config.signal * visibility[best]
    code_exp = config.iou_exponent if config.offset_iou_exponent is None else config.offset_iou_exponent
    features = strength[:, None] * (
        (best_iou**config.iou_exponent)[:, None] * world.prototypes[classes[best] - 1]
        + (config.offset_signal * best_iou**code_exp)[:, None] * code
    )
    features = features + config.noise * rng.standard_normal(features.shape)
    features = quantize(features)

    bag = ProposalBag(
        image_id=image_id,
        proposals=proposals,
        features=features,
        labels=frozenset(labels),
        width=W,
        height=H,
    )
    gt = tuple(GroundTruthObject(int(c), Box.from_array(o)) for c, o in zip(classes, objects))
    return bag, gt


def _build(config: SyntheticConfig, world: _World, rng, count: int, prefix: str) -> WeaklyLabeledDataset:
    samples, gt = [], {}
    for i in range(count):
        bag, objects = _sample_image(config, world, rng, f"{prefix}{i:05d}")
        samples.append(bag)
        gt[bag.image_id] = objects
    return WeaklyLabeledDataset(tuple(samples), config.num_classes, config.feature_dim, gt)


def generate(config: SyntheticConfig) -> WeaklyLabeledDataset:
    """Generate ``config.num_images`` training images (deterministic given the seed)."""
    return generate_splits(config)[0]


def generate_splits(config: SyntheticConfig) -> tuple[WeaklyLabeledDataset, WeaklyLabeledDataset]:
    """Generate a (train, test) pair sharing the same class appearance model."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    world = _World(config, rng)
    train_rng, test_rng = rng.spawn(2)
    train = _build(config, world, train_rng, config.num_images, "img")
    test = _build(config, world, test_rng, config.num_test_images, "test")
    return train, test


def iter_labeled(dataset: WeaklyLabeledDataset) -> Iterable[tuple[ProposalBag, int]]:
    """Yield every (bag, label) pair of the dataset."""
    for bag in dataset.samples:
        for y in sorted(bag.labels):
            yield bag, y
