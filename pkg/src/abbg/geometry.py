"""Axis-aligned box arithmetic and adversarial candidate-box generation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box; (x, y) is the top-left corner, sizes in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"box field {name} is not finite: {value!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=float)


@dataclass(frozen=True)
class BoxGenConfig:
    """Sampling ranges for the adversarial candidate boxes.

    Offsets are fractions of the source box extent (offset = shift * w along x,
    shift * h along y), scales multiply both sides. With ``symmetric_shift_sign``
    the offset direction is randomized per box and axis instead of the default
    consistent down-right drift.
    """

    k: int = 1024
    shift_min: float = 0.1
    shift_max: float = 0.4
    scale_min: float = 0.7
    scale_max: float = 0.9
    retain_fraction: float = 0.8
    symmetric_shift_sign: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0 <= self.shift_min <= self.shift_max:
            raise ValueError(f"need 0 <= shift_min <= shift_max, got [{self.shift_min}, {self.shift_max}]")
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError(f"need 0 < scale_min <= scale_max, got [{self.scale_min}, {self.scale_max}]")
        if not 0 < self.retain_fraction <= 1:
            raise ValueError(f"retain_fraction must be in (0, 1], got {self.retain_fraction}")


@dataclass
class AdversarialBoxBatch:
    """k generated boxes with their overlaps against the source prediction.

    ``threshold`` and ``selected`` stay unset until select_positive fills them;
    ``boxes`` rows are (x, y, w, h).
    """

    boxes: np.ndarray
    ious: np.ndarray
    threshold: float | None = None
    selected: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.boxes.shape[0]

    def selected_boxes(self) -> np.ndarray:
        if self.selected is None:
            raise ValueError("selection has not been computed for this batch")
        return self.boxes[self.selected]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    left = max(a.x, b.x)
    right = min(a.x + a.w, b.x + b.w)
    top = max(a.y, b.y)
    bottom = min(a.y + a.h, b.y + b.h)
    inter = max(0.0, right - left) * max(0.0, bottom - top)
    union = a.area + b.area - inter
    return inter / union


def center_distance(a: BoundingBox, b: BoundingBox) -> float:
    """Euclidean distance between box centers, in pixels."""
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def _iou_one_to_many(ref: BoundingBox, boxes: np.ndarray) -> np.ndarray:
    left = np.maximum(ref.x, boxes[:, 0])
    right = np.minimum(ref.x + ref.w, boxes[:, 0] + boxes[:, 2])
    top = np.maximum(ref.y, boxes[:, 1])
    bottom = np.minimum(ref.y + ref.h, boxes[:, 1] + boxes[:, 3])
    inter = np.maximum(0.0, right - left) * np.maximum(0.0, bottom - top)
    union = ref.area + boxes[:, 2] * boxes[:, 3] - inter
    return inter / union


def generate_adversarial_boxes(
    predicted: BoundingBox, cfg: BoxGenConfig, rng: np.random.Generator
) -> AdversarialBoxBatch:
    """Sample k shifted-and-shrunken boxes around ``predicted``.

    Per box i: x'_i = x + shift_x_i * w, y'_i = y + shift_y_i * h,
    w'_i = w * s_i, h'_i = h * s_i, with the shifts and scale drawn uniformly
    from the configured ranges. Deterministic for a fixed rng state; the draw
    order is shift_x, shift_y, scale (then signs when enabled).
    """
    if predicted.w < 1.0 or predicted.h < 1.0:
        raise ValueError(
            f"refusing to generate around a sub-pixel box (w={predicted.w}, h={predicted.h})"
        )
    shift_x = rng.uniform(cfg.shift_min, cfg.shift_max, cfg.k)
    shift_y = rng.uniform(cfg.shift_min, cfg.shift_max, cfg.k)
    scale = rng.uniform(cfg.scale_min, cfg.scale_max, cfg.k)
    if cfg.symmetric_shift_sign:
        shift_x = shift_x * (rng.integers(0, 2, cfg.k) * 2 - 1)
        shift_y = shift_y * (rng.integers(0, 2, cfg.k) * 2 - 1)

    boxes = np.empty((cfg.k, 4), dtype=float)
    boxes[:, 0] = predicted.x + shift_x * predicted.w
    boxes[:, 1] = predicted.y + shift_y * predicted.h
    boxes[:, 2] = predicted.w * scale
    boxes[:, 3] = predicted.h * scale
    if np.any(boxes[:, 2] <= 0) or np.any(boxes[:, 3] <= 0):
        raise ValueError("generated a degenerate box with non-positive side")
    return AdversarialBoxBatch(boxes=boxes, ious=_iou_one_to_many(predicted, boxes))


def select_positive(batch: AdversarialBoxBatch, retain_fraction: float) -> AdversarialBoxBatch:
    """Keep the top ceil(retain_fraction * k) boxes by IoU, ties by lower index.

    The adaptive threshold is the smallest retained IoU, so every selected box
    sits at or above it and the selection is never empty.
    """
    if not 0 < retain_fraction <= 1:
        raise ValueError(f"retain_fraction must be in (0, 1], got {retain_fraction}")
    n_keep = math.ceil(retain_fraction * batch.k)
    order = np.argsort(-batch.ious, kind="stable")
    kept = np.sort(order[:n_keep])
    threshold = float(batch.ious[order[n_keep - 1]])
    return AdversarialBoxBatch(
        boxes=batch.boxes, ious=batch.ious, threshold=threshold, selected=kept
    )
