"""Linear detection head: (C+1)-way softmax classifier plus C class-specific box regressors.

Weights carry their bias in the last column, so a feature vector ``x`` is
augmented to ``[x, 1]`` before every product. Class index 0 is background;
object classes are 1..C throughout the package.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from spwsd.geometry import Box, decode_array

SMOOTH_L1_BETA = 1.0
# cap on predicted log-scale deltas, keeps exp() finite for wild regressors
MAX_LOG_SCALE = float(np.log(1000.0 / 16.0))
REG_LOSS_WEIGHT = 1.0

CHECKPOINT_MAGIC = b"SPWSDCKP"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A training step produced NaN or Inf weights."""


@dataclass
class DetectorModel:
    w_cls: np.ndarray  # (C+1, d+1)
    w_reg: np.ndarray  # (4C, d+1)
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    v_cls: Optional[np.ndarray] = None
    v_reg: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.w_cls = np.asarray(self.w_cls, dtype=np.float64)
        self.w_reg = np.asarray(self.w_reg, dtype=np.float64)
        c1, d1 = self.w_cls.shape
        if self.w_reg.shape != (4 * (c1 - 1), d1):
            raise ValueError(f"w_reg shape {self.w_reg.shape} incompatible with w_cls {self.w_cls.shape}")
        self.v_cls = np.zeros_like(self.w_cls) if self.v_cls is None else np.asarray(self.v_cls, dtype=np.float64)
        self.v_reg = np.zeros_like(self.w_reg) if self.v_reg is None else np.asarray(self.v_reg, dtype=np.float64)

    @classmethod
    def zeros(cls, num_classes: int, feature_dim: int, **hyper) -> "DetectorModel":
        return cls(
            np.zeros((num_classes + 1, feature_dim + 1)),
            np.zeros((4 * num_classes, feature_dim + 1)),
            **hyper,
        )

    @classmethod
    def initialize(cls, num_classes: int, feature_dim: int, rng: np.random.Generator, std: float = 0.01,
                   reg_std: float = 0.01, **hyper):
        """Gaussian weights (``std`` for the classifier, ``reg_std`` for the regressors), zero biases."""
        model = cls.zeros(num_classes, feature_dim, **hyper)
        model.w_cls[:, :-1] = rng.normal(0.0, std, (num_classes + 1, feature_dim))
        model.w_reg[:, :-1] = rng.normal(0.0, reg_std, (4 * num_classes, feature_dim))
        return model

    @property
    def num_classes(self) -> int:
        return self.w_cls.shape[0] - 1

    @property
    def feature_dim(self) -> int:
        return self.w_cls.shape[1] - 1

    def copy(self) -> "DetectorModel":
        return DetectorModel(
            self.w_cls.copy(), self.w_reg.copy(), self.lr, self.momentum, self.weight_decay,
            self.v_cls.copy(), self.v_reg.copy(),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DetectorModel):
            return NotImplemented
        return (
            (self.lr, self.momentum, self.weight_decay) == (other.lr, other.momentum, other.weight_decay)
            and all(
                np.array_equal(a, b)
                for a, b in zip(
                    (self.w_cls, self.w_reg, self.v_cls, self.v_reg),
                    (other.w_cls, other.w_reg, other.v_cls, other.v_reg),
                )
            )
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Detection:
    score: float
    box: Box
    label: int
    proposal: int


@dataclass(frozen=True)
class DetectionGrid:
    """Per-proposal, per-class detections ``d_ic`` of one bag.

    ``scores[i, c-1]`` and ``boxes[i, c-1]`` hold the score and predicted box for
    proposal ``i`` and object class ``c``; background is already dropped.
    """

    scores: np.ndarray  # (n, C)
    boxes: np.ndarray  # (n, C, 4)
    background: np.ndarray  # (n,)

    def __len__(self) -> int:
        return self.scores.size

    def __iter__(self) -> Iterator[Detection]:
        n, c = self.scores.shape
        for i in range(n):
            for k in range(c):
                yield Detection(float(self.scores[i, k]), Box.from_array(self.boxes[i, k]), k + 1, i)


@dataclass
class MiniBatch:
    """Sampled boxes for one SGD step.

    ``targets`` rows are NaN for background samples (class 0), which carry no
    regression loss.
    """

    features: np.ndarray  # (B, d)
    classes: np.ndarray  # (B,)
    targets: np.ndarray  # (B, 4)
    image_ids: tuple = ()
    bg_fallback: tuple = ()

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 4)
        fg = self.classes > 0
        if not np.all(np.isfinite(self.targets[fg])) or not np.all(np.isnan(self.targets[~fg])):
            raise ValueError("regression targets must be present exactly for foreground samples")

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def num_foreground(self) -> int:
        return int(np.count_nonzero(self.classes > 0))


@dataclass
class Gradients:
    w_cls: np.ndarray
    w_reg: np.ndarray


def _augment(features: np.ndarray) -> np.ndarray:
    return np.hstack([features, np.ones((features.shape[0], 1))])


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def class_probabilities(model: DetectorModel, features: np.ndarray) -> np.ndarray:
    """Softmax over the C+1 classes (background first) for each feature row."""
    return _softmax(_augment(np.asarray(features, dtype=np.float64)) @ model.w_cls.T)


def forward(model: DetectorModel, bag, use_regression: bool = True) -> DetectionGrid:
    """Score every proposal of ``bag`` for every object class.

    With ``use_regression`` off, each predicted box is the proposal itself.
    """
    if bag.feature_dim != model.feature_dim:
        raise ValueError(f"bag {bag.image_id}: feature dim {bag.feature_dim} != model dim {model.feature_dim}")
    x = _augment(bag.features)
    probs = _softmax(x @ model.w_cls.T)
    n, c = bag.num_proposals, model.num_classes
    if use_regression:
        deltas = (x @ model.w_reg.T).reshape(n, c, 4)
        deltas[..., 2:] = np.minimum(deltas[..., 2:], MAX_LOG_SCALE)
        boxes = decode_array(deltas, bag.proposals[:, None, :])
    else:
        boxes = np.broadcast_to(bag.proposals[:, None, :], (n, c, 4)).copy()
    return DetectionGrid(scores=probs[:, 1:], boxes=boxes, background=probs[:, 0])


def _smooth_l1(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ax = np.abs(x)
    small = ax < SMOOTH_L1_BETA
    value = np.where(small, 0.5 * x * x / SMOOTH_L1_BETA, ax - 0.5 * SMOOTH_L1_BETA)
    grad = np.where(small, x / SMOOTH_L1_BETA, np.sign(x))
    return value, grad


def loss_and_gradient(model: DetectorModel, batch: MiniBatch) -> tuple[float, Gradients]:
    """Multi-task loss of a mini-batch and its exact gradient.

    loss = mean cross-entropy + mean over foreground samples of the summed
    smooth-L1 on the class-specific deltas + weight_decay / 2 * ||W||^2
    (bias columns are not decayed).
    """
    if len(batch) == 0:
        raise ValueError("empty mini-batch")
    x = _augment(batch.features)
    b = len(batch)
    probs = _softmax(x @ model.w_cls.T)
    rows = np.arange(b)
    ce = -np.log(np.clip(probs[rows, batch.classes], 1e-300, None))
    loss = float(ce.mean())

    d_logits = probs.copy()
    d_logits[rows, batch.classes] -= 1.0
    g_cls = d_logits.T @ x / b

    g_reg = np.zeros_like(model.w_reg)
    fg = np.flatnonzero(batch.classes > 0)
    if fg.size:
        xf = x[fg]
        slots = (batch.classes[fg] - 1)[:, None] * 4 + np.arange(4)[None, :]
        pred = np.einsum("bkd,bd->bk", model.w_reg[slots], xf)
        value, grad = _smooth_l1(pred - batch.targets[fg])
        loss += REG_LOSS_WEIGHT * float(value.sum(axis=1).mean())
        np.add.at(g_reg, slots, REG_LOSS_WEIGHT * grad[:, :, None] * xf[:, None, :] / fg.size)

    wd = model.weight_decay
    if wd:
        loss += 0.5 * wd * float(np.sum(model.w_cls[:, :-1] ** 2) + np.sum(model.w_reg[:, :-1] ** 2))
        g_cls[:, :-1] += wd * model.w_cls[:, :-1]
        g_reg[:, :-1] += wd * model.w_reg[:, :-1]
    return loss, Gradients(g_cls, g_reg)


def sgd_step(model: DetectorModel, grads: Gradients) -> DetectorModel:
    """One momentum update in place: ``v <- mu*v - lr*g; W <- W + v``."""
    if grads.w_cls.shape != model.w_cls.shape or grads.w_reg.shape != model.w_reg.shape:
        raise ValueError("gradient shapes do not match the model")
    v_cls = model.momentum * model.v_cls - model.lr * grads.w_cls
    v_reg = model.momentum * model.v_reg - model.lr * grads.w_reg
    w_cls = model.w_cls + v_cls
    w_reg = model.w_reg + v_reg
    if not (np.all(np.isfinite(w_cls)) and np.all(np.isfinite(w_reg))):
        raise NonFiniteError(
            f"non-finite weights after SGD step (lr={model.lr}, "
            f"max|g_cls|={np.nanmax(np.abs(grads.w_cls)):.3g}, max|g_reg|={np.nanmax(np.abs(grads.w_reg)):.3g})"
        )
    model.v_cls, model.v_reg, model.w_cls, model.w_reg = v_cls, v_reg, w_cls, w_reg
    return model


def drop_learning_rate(model: DetectorModel, factor: float) -> DetectorModel:
    model.lr = model.lr / factor
    return model


def train_step(model: DetectorModel, batch: MiniBatch) -> float:
    loss, grads = loss_and_gradient(model, batch)
    sgd_step(model, grads)
    return loss


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC (8 bytes) | uint32 LE version | uint32 LE header length |
# UTF-8 JSON header | float64 LE arrays w_cls, w_reg, v_cls, v_reg (C order)


def checkpoint_bytes(model: DetectorModel) -> bytes:
    header = {
        "num_classes": model.num_classes,
        "feature_dim": model.feature_dim,
        "lr": float(model.lr).hex(),
        "momentum": float(model.momentum).hex(),
        "weight_decay": float(model.weight_decay).hex(),
        "arrays": ["w_cls", "w_reg", "v_cls", "v_reg"],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (model.w_cls, model.w_reg, model.v_cls, model.v_reg)
    )
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(head)) + head + body


def model_from_bytes(blob: bytes) -> DetectorModel:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a detector checkpoint")
    version, head_len = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16 : 16 + head_len].decode("utf-8"))
    c, d = header["num_classes"], header["feature_dim"]
    shapes = [(c + 1, d + 1), (4 * c, d + 1), (c + 1, d + 1), (4 * c, d + 1)]
    offset = 16 + head_len
    arrays = []
    for shape in shapes:
        count = shape[0] * shape[1]
        arrays.append(np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape))
        offset += 8 * count
    if offset != len(blob):
        raise ValueError("checkpoint has trailing or missing bytes")
    return DetectorModel(
        arrays[0], arrays[1],
        lr=float.fromhex(header["lr"]),
        momentum=float.fromhex(header["momentum"]),
        weight_decay=float.fromhex(header["weight_decay"]),
        v_cls=arrays[2], v_reg=arrays[3],
    )


def save_checkpoint(model: DetectorModel, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


def load_checkpoint(path: str | Path) -> DetectorModel:
    return model_from_bytes(Path(path).read_bytes())
