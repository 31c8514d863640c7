"""Reference GreedyNMS, used both as an engine and as the overlap oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxcore import Detection, DetectionBatch, NmsConfig, as_batch, box_area


@dataclass(frozen=True)
class KeptSet:
    """Kept detection ids in output order, with their scores."""

    det_ids: tuple[int, ...] = ()
    scores: tuple[float, ...] = ()

    def __len__(self) -> int:
        return len(self.det_ids)

    def __iter__(self):
        return iter(self.det_ids)

    @property
    def ids(self) -> frozenset[int]:
        return frozenset(self.det_ids)

    @classmethod
    def from_arrays(cls, det_ids, scores) -> KeptSet:
        return cls(tuple(int(i) for i in det_ids), tuple(float(s) for s in scores))


def score_order(scores: np.ndarray, det_ids: np.ndarray) -> np.ndarray:
    """Indices sorting by descending score, ties by ascending det_id."""
    return np.lexsort((det_ids, -scores))


def greedy_nms(
    dets: DetectionBatch | Sequence[Detection],
    iou_thresh: float = 0.5,
    top_k: int | None = None,
) -> KeptSet:
    """Greedy non-maximum suppression over single-class detections.

    A box is kept iff its IoU with every already kept box is strictly below
    ``iou_thresh``. Scanning stops once ``top_k`` boxes are kept.
    """
    batch = as_batch(dets)
    if len(batch) == 0:
        return KeptSet()
    order = score_order(batch.scores, batch.det_ids)
    boxes = batch.boxes[order]
    areas = box_area(boxes)
    limit = len(order) if top_k is None else top_k

    keep = []
    remaining = np.arange(len(order))
    while remaining.size and len(keep) < limit:
        i = remaining[0]
        keep.append(i)
        rest = remaining[1:]
        iw = np.minimum(boxes[i, 2], boxes[rest, 2]) - np.maximum(boxes[i, 0], boxes[rest, 0])
        ih = np.minimum(boxes[i, 3], boxes[rest, 3]) - np.maximum(boxes[i, 1], boxes[rest, 1])
        inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
        union = areas[i] + areas[rest] - inter
        overlap = np.zeros(rest.size)
        np.divide(inter, union, out=overlap, where=union > 0.0)
        remaining = rest[overlap < iou_thresh]

    kept = order[np.asarray(keep, dtype=np.int64)]
    return KeptSet.from_arrays(batch.det_ids[kept], batch.scores[kept])


def greedy_nms_all_classes(
    dets: DetectionBatch | Sequence[Detection], config: NmsConfig
) -> dict[int, KeptSet]:
    batch = as_batch(dets)
    return {
        cls: greedy_nms(sub, config.greedy_iou, config.top_k)
        for cls, sub in batch.by_class().items()
    }
