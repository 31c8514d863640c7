"""
Box geometry and the shared detection data model.

Boxes are corner form ``(x1, y1, x2, y2)`` in continuous pixel coordinates.
Engines work on :class:`DetectionBatch`, a columnar view over many
:class:`Detection` records, so that large candidate pools stay in numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_SCALES = (64.0**2, 128.0**2, 256.0**2, 512.0**2)
DEFAULT_RATIOS = (0.5, 1.0, 2.0)
ASSIGNMENTS = ("max", "sum", "random")


class UnsupportedInputError(ValueError):
    """Raised when an engine needs metadata the detections do not carry."""


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class SourceAnchor:
    """Pre-regression anchor (or proposal) box and its default channel."""

    box: BoundingBox
    channel: int


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float
    class_id: int
    det_id: int
    source: SourceAnchor | None = None

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score!r}")


def normalize(box: BoundingBox, image_size: tuple[float, float] | None = None) -> BoundingBox:
    """Reorder corners so that x1 <= x2 and y1 <= y2.

    Args:
        box: any four coordinates.
        image_size: optional ``(width, height)``; when given, coordinates are
            clamped to ``[0, width] x [0, height]``.

    Raises:
        ValueError: a coordinate is NaN or infinite.
    """
    coords = box.as_tuple()
    if not all(math.isfinite(c) for c in coords):
        raise ValueError(f"non-finite box coordinate in {coords}")
    x1, x2 = sorted((coords[0], coords[2]))
    y1, y2 = sorted((coords[1], coords[3]))
    if image_size is not None:
        w, h = image_size
        x1, x2 = min(max(x1, 0.0), w), min(max(x2, 0.0), w)
        y1, y2 = min(max(y1, 0.0), h), min(max(y2, 0.0), h)
    return BoundingBox(float(x1), float(y1), float(x2), float(y2))


def center_and_size(box: BoundingBox) -> tuple[float, float, float, float]:
    """Return ``(x_c, y_c, w, h)`` of a normalized box."""
    return (
        (box.x1 + box.x2) / 2.0,
        (box.y1 + box.y2) / 2.0,
        box.x2 - box.x1,
        box.y2 - box.y1,
    )


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two normalized boxes.

    Zero-area boxes have IoU 0 with everything, including themselves.
    """
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(inter / union, 1.0)


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.clip(boxes[..., 2] - boxes[..., 0], 0.0, None) * np.clip(
        boxes[..., 3] - boxes[..., 1], 0.0, None
    )


def iou_one_to_many(box: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """IoU of one ``(4,)`` box against ``(N, 4)`` boxes."""
    iw = np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0])
    ih = np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = box_area(box) + box_area(boxes) - inter
    out = np.zeros(len(boxes), dtype=np.float64)
    np.divide(inter, union, out=out, where=union > 0.0)
    return np.minimum(out, 1.0)


def pairwise_iou(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """(N, M) IoU matrix between two sets of corner-form boxes."""
    boxes1 = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    boxes2 = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = np.minimum(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(boxes1)[:, None] + box_area(boxes2)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return np.minimum(out, 1.0)


@dataclass(frozen=True)
class NmsConfig:
    """Parameters shared by every engine.

    ``ratios`` are height:width ratios. ``schedule`` is a ``+``-joined list of
    pooling stage kinds, e.g. ``"single+ratio+scale+all"``.
    """

    alpha: float = 0.75
    beta: float = 16.0
    scales: tuple[float, ...] = DEFAULT_SCALES
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    image_w: float = 1000.0
    image_h: float = 600.0
    top_k: int = 200
    assignment: str = "max"
    schedule: str = "single+ratio+scale+all"
    shifted: bool = True
    greedy_iou: float = 0.5
    seed: int = 0
    log_space_channels: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.beta < 1.0:
            raise ValueError(f"beta must be >= 1, got {self.beta}")
        for name in ("scales", "ratios"):
            values = getattr(self, name)
            if not values or any(v <= 0 for v in values):
                raise ValueError(f"{name} must be a non-empty list of positive values")
            if any(b <= a for a, b in zip(values, values[1:])):
                raise ValueError(f"{name} must be strictly increasing")
        if self.image_w <= 0 or self.image_h <= 0:
            raise ValueError("image dimensions must be positive")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.assignment not in ASSIGNMENTS:
            raise ValueError(f"assignment must be one of {ASSIGNMENTS}, got {self.assignment!r}")
        if not (0.0 < self.greedy_iou < 1.0):
            raise ValueError(f"greedy_iou must lie in (0, 1), got {self.greedy_iou}")
        if not self.schedule:
            raise ValueError("schedule must name at least one stage")

    @property
    def n_channels(self) -> int:
        return len(self.scales) * len(self.ratios)

    def channel(self, scale_index: int, ratio_index: int) -> int:
        return scale_index * len(self.ratios) + ratio_index


@dataclass
class DetectionBatch:
    """Columnar detections of one image.

    ``src_channels`` is -1 and ``src_boxes`` NaN where no source anchor exists.
    """

    boxes: np.ndarray
    scores: np.ndarray
    class_ids: np.ndarray
    det_ids: np.ndarray
    src_boxes: np.ndarray = field(default=None)
    src_channels: np.ndarray = field(default=None)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        n = len(self.boxes)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(n)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(n)
        self.det_ids = np.asarray(self.det_ids, dtype=np.int64).reshape(n)
        if self.src_boxes is None:
            self.src_boxes = np.full((n, 4), np.nan)
        else:
            self.src_boxes = np.asarray(self.src_boxes, dtype=np.float64).reshape(n, 4)
        if self.src_channels is None:
            self.src_channels = np.full(n, -1, dtype=np.int64)
        else:
            self.src_channels = np.asarray(self.src_channels, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def has_sources(self) -> bool:
        return bool(np.all(self.src_channels >= 0))

    def subset(self, mask_or_index) -> DetectionBatch:
        return DetectionBatch(
            self.boxes[mask_or_index],
            self.scores[mask_or_index],
            self.class_ids[mask_or_index],
            self.det_ids[mask_or_index],
            self.src_boxes[mask_or_index],
            self.src_channels[mask_or_index],
        )

    def by_class(self) -> dict[int, DetectionBatch]:
        return {int(c): self.subset(self.class_ids == c) for c in np.unique(self.class_ids)}

    @classmethod
    def empty(cls) -> DetectionBatch:
        return cls(np.zeros((0, 4)), [], [], [])

    @classmethod
    def from_detections(cls, dets: Iterable[Detection]) -> DetectionBatch:
        dets = list(dets)
        if not dets:
            return cls.empty()
        src_boxes = [d.source.box.as_tuple() if d.source else (np.nan,) * 4 for d in dets]
        return cls(
            [d.box.as_tuple() for d in dets],
            [d.score for d in dets],
            [d.class_id for d in dets],
            [d.det_id for d in dets],
            src_boxes,
            [d.source.channel if d.source else -1 for d in dets],
        )

    def to_detections(self) -> list[Detection]:
        out = []
        for i in range(len(self)):
            source = None
            if self.src_channels[i] >= 0:
                source = SourceAnchor(BoundingBox(*map(float, self.src_boxes[i])), int(self.src_channels[i]))
            out.append(
                Detection(
                    BoundingBox(*map(float, self.boxes[i])),
                    float(self.scores[i]),
                    int(self.class_ids[i]),
                    int(self.det_ids[i]),
                    source,
                )
            )
        return out


def as_batch(dets: DetectionBatch | Sequence[Detection]) -> DetectionBatch:
    if isinstance(dets, DetectionBatch):
        return dets
    return DetectionBatch.from_detections(dets)
