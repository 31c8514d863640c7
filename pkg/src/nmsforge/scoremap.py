"""
Confidence score maps.

Each detection of one class is projected to a cell ``(channel, Y, X)`` of a
stack of per-(scale, ratio) maps. Channel ``c = scale_index * n_ratios +
ratio_index``. Three projections are supported:

``recovery``
    cell from the regressed box center, channel from its nearest scale/ratio.
``legacy``
    cell and channel from the pre-regression source anchor.
``spatial``
    cell from the regressed box center, channel from the source anchor.

Several detections landing in one cell are reduced by score assignment.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .boxcore import (
    ASSIGNMENTS,
    Detection,
    DetectionBatch,
    NmsConfig,
    UnsupportedInputError,
    as_batch,
    center_and_size,
)

PROJECTIONS = ("recovery", "legacy", "spatial")
EMPTY = -1


def round_half_up(x):
    """Round to nearest with halves going up, as in ``floor(x + 0.5)``."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def map_shape(config: NmsConfig) -> tuple[int, int]:
    """``(map_h, map_w)``: image size over beta, rounded to nearest, at least 1."""
    map_h = max(int(round_half_up(config.image_h / config.beta)), 1)
    map_w = max(int(round_half_up(config.image_w / config.beta)), 1)
    return map_h, map_w


@dataclass(frozen=True)
class ScoreMapStack:
    """Score maps of shape ``(channels, map_h, map_w)``.

    ``det_ids`` holds -1 in empty cells; ``scores`` holds 0 there.
    """

    scores: np.ndarray
    det_ids: np.ndarray
    scales: tuple[float, ...]
    ratios: tuple[float, ...]
    n_degenerate: int = 0

    def __post_init__(self):
        for arr in (self.scores, self.det_ids):
            arr.flags.writeable = False

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.det_ids.shape

    @property
    def occupied(self) -> np.ndarray:
        return self.det_ids != EMPTY

    @property
    def n_nonempty(self) -> int:
        return int(np.count_nonzero(self.occupied))

    def channel_meta(self, channel: int) -> tuple[float, float]:
        return self.scales[channel // len(self.ratios)], self.ratios[channel % len(self.ratios)]

    def cells(self) -> list[tuple[int, int, int, float, int]]:
        """Non-empty cells as ``(channel, Y, X, score, det_id)`` in flat order."""
        c, y, x = np.nonzero(self.occupied)
        return [
            (int(ci), int(yi), int(xi), float(self.scores[ci, yi, xi]), int(self.det_ids[ci, yi, xi]))
            for ci, yi, xi in zip(c, y, x)
        ]

    def replace(self, scores: np.ndarray, det_ids: np.ndarray) -> ScoreMapStack:
        return ScoreMapStack(scores, det_ids, self.scales, self.ratios, self.n_degenerate)

    def __eq__(self, other):
        if not isinstance(other, ScoreMapStack):
            return NotImplemented
        return (
            self.scales == other.scales
            and self.ratios == other.ratios
            and np.array_equal(self.det_ids, other.det_ids)
            and np.array_equal(self.scores, other.scores)
        )

    __hash__ = None

    @classmethod
    def empty(cls, config: NmsConfig) -> ScoreMapStack:
        shape = (config.n_channels, *map_shape(config))
        return cls(np.zeros(shape), np.full(shape, EMPTY, dtype=np.int64), config.scales, config.ratios)


@dataclass
class CellBucket:
    """All ``(score, det_id)`` candidates projected to one cell."""

    candidates: list[tuple[float, int]] = field(default_factory=list)


def spatial_recover(x_c, y_c, beta: float, map_w: int, map_h: int):
    """Cell index of a box center: ``floor(center / beta)`` clamped to the grid.

    Works on scalars or arrays.
    """
    X = np.clip(np.floor(np.asarray(x_c, dtype=np.float64) / beta), 0, map_w - 1).astype(np.int64)
    Y = np.clip(np.floor(np.asarray(y_c, dtype=np.float64) / beta), 0, map_h - 1).astype(np.int64)
    if X.ndim == 0:
        return int(X), int(Y)
    return X, Y


def channel_recover_many(widths, heights, scales, ratios, log_space: bool = False):
    """Vectorized channel recovery.

    Nearest scale by ``|w*h - s|`` and nearest ratio by ``|h/w - r|``;
    equidistant candidates resolve to the smaller value. Zero-size boxes go
    to the smallest scale and the ratio nearest to 1.

    Returns:
        ``(channels, degenerate_mask)``
    """
    w = np.asarray(widths, dtype=np.float64)
    h = np.asarray(heights, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    ratios = np.asarray(ratios, dtype=np.float64)
    degenerate = (w <= 0) | (h <= 0)
    safe_w = np.where(degenerate, 1.0, w)
    safe_h = np.where(degenerate, 1.0, h)
    area = safe_w * safe_h
    # subnormal widths overflow to inf, which still picks the largest ratio
    with np.errstate(over="ignore"):
        ratio = safe_h / safe_w
    if log_space:
        s_idx = np.argmin(np.abs(np.log(area)[:, None] - np.log(scales)[None, :]), axis=1)
        r_idx = np.argmin(np.abs(np.log(ratio)[:, None] - np.log(ratios)[None, :]), axis=1)
    else:
        s_idx = np.argmin(np.abs(area[:, None] - scales[None, :]), axis=1)
        r_idx = np.argmin(np.abs(ratio[:, None] - ratios[None, :]), axis=1)
    s_idx = np.where(degenerate, 0, s_idx)
    r_idx = np.where(degenerate, int(np.argmin(np.abs(ratios - 1.0))), r_idx)
    return s_idx * len(ratios) + r_idx, degenerate


def channel_recover(w: float, h: float, scales: Sequence[float], ratios: Sequence[float], log_space=False) -> int:
    channels, _ = channel_recover_many([w], [h], scales, ratios, log_space)
    return int(channels[0])


def legacy_project(det: Detection, config: NmsConfig) -> tuple[int, int, int]:
    """Anchor-based projection: the source anchor's channel and center cell.

    Raises:
        UnsupportedInputError: the detection carries no source anchor.
    """
    if det.source is None:
        raise UnsupportedInputError(
            f"detection {det.det_id} has no source anchor; legacy projection needs anchor metadata"
        )
    map_h, map_w = map_shape(config)
    x_c, y_c, _, _ = center_and_size(det.source.box)
    X, Y = spatial_recover(x_c, y_c, config.beta, map_w, map_h)
    return det.source.channel, Y, X


def project(batch: DetectionBatch, config: NmsConfig, projection: str = "recovery"):
    """Flat cell index of every detection, plus the degenerate-box count."""
    if projection not in PROJECTIONS:
        raise ValueError(f"projection must be one of {PROJECTIONS}, got {projection!r}")
    map_h, map_w = map_shape(config)
    n_degenerate = 0
    if projection in ("legacy", "spatial"):
        if len(batch) and not batch.has_sources:
            missing = int(batch.det_ids[np.argmax(batch.src_channels < 0)])
            raise UnsupportedInputError(
                f"{projection} projection needs source anchors; detection {missing} has none"
            )
        channels = batch.src_channels
        if np.any(channels >= config.n_channels):
            raise UnsupportedInputError("source anchor channel outside the configured scale/ratio grid")
    ref = batch.src_boxes if projection == "legacy" else batch.boxes
    x_c = (ref[:, 0] + ref[:, 2]) / 2.0
    y_c = (ref[:, 1] + ref[:, 3]) / 2.0
    X, Y = spatial_recover(x_c, y_c, config.beta, map_w, map_h)
    if projection == "recovery":
        b = batch.boxes
        channels, degenerate = channel_recover_many(
            b[:, 2] - b[:, 0], b[:, 3] - b[:, 1], config.scales, config.ratios, config.log_space_channels
        )
        n_degenerate = int(degenerate.sum())
    return (channels * map_h + Y) * map_w + X, n_degenerate


def _assign(keys, scores, det_ids, shape, variant, rng=None):
    """Reduce candidates sharing a flat cell key to one per cell."""
    n_cells = int(np.prod(shape))
    out_scores = np.zeros(n_cells)
    out_ids = np.full(n_cells, EMPTY, dtype=np.int64)
    if len(keys) == 0:
        return out_scores.reshape(shape), out_ids.reshape(shape)
    if variant not in ASSIGNMENTS:
        raise ValueError(f"assignment must be one of {ASSIGNMENTS}, got {variant!r}")

    # within each cell: best score first, ties by lowest id
    order = np.lexsort((det_ids, -scores, keys))
    k_sorted = keys[order]
    starts = np.flatnonzero(np.r_[True, k_sorted[1:] != k_sorted[:-1]])
    heads = order[starts]
    cell = keys[heads]

    if variant == "max":
        out_scores[cell] = scores[heads]
        out_ids[cell] = det_ids[heads]
    elif variant == "sum":
        # summing in a canonical order keeps the result permutation-independent
        canon = np.lexsort((det_ids, keys))
        sums = np.add.reduceat(scores[canon], starts)
        out_scores[cell] = np.minimum(sums, 1.0)
        out_ids[cell] = det_ids[heads]
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        priority = rng.random(len(keys))
        pick = np.lexsort((-priority, keys))
        first = pick[np.flatnonzero(np.r_[True, keys[pick][1:] != keys[pick][:-1]])]
        out_scores[keys[first]] = scores[first]
        out_ids[keys[first]] = det_ids[first]
    return out_scores.reshape(shape), out_ids.reshape(shape)


def assign_scores(
    buckets: Mapping[tuple[int, int, int], CellBucket],
    variant: str,
    config: NmsConfig,
    seed: int | None = None,
) -> ScoreMapStack:
    """Build a stack from explicit per-cell buckets keyed by ``(channel, Y, X)``.

    ``max`` keeps the top candidate (ties: lowest id). ``sum`` adds the
    bucket's scores, clamps to 1 and names the top candidate. ``random``
    picks a uniformly random candidate from a generator seeded by ``seed``
    (default ``config.seed``).
    """
    shape = (config.n_channels, *map_shape(config))
    keys, scores, ids = [], [], []
    for (c, y, x), bucket in buckets.items():
        flat = int(np.ravel_multi_index((c, y, x), shape))
        for score, det_id in bucket.candidates:
            keys.append(flat)
            scores.append(score)
            ids.append(det_id)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    s, d = _assign(
        np.asarray(keys, dtype=np.int64), np.asarray(scores, dtype=np.float64),
        np.asarray(ids, dtype=np.int64), shape, variant, rng,
    )
    return ScoreMapStack(s, d, config.scales, config.ratios)


def build_buckets(dets, config: NmsConfig, projection: str = "recovery") -> dict[tuple[int, int, int], CellBucket]:
    batch = as_batch(dets)
    keys, _ = project(batch, config, projection)
    shape = (config.n_channels, *map_shape(config))
    buckets: dict[tuple[int, int, int], CellBucket] = {}
    for key, score, det_id in zip(keys, batch.scores, batch.det_ids):
        cell = tuple(int(v) for v in np.unravel_index(int(key), shape))
        buckets.setdefault(cell, CellBucket()).candidates.append((float(score), int(det_id)))
    return buckets


def build_score_maps(
    dets: DetectionBatch | Sequence[Detection],
    config: NmsConfig,
    projection: str = "recovery",
) -> ScoreMapStack:
    """Project single-class detections onto a score-map stack."""
    batch = as_batch(dets)
    keys, n_degenerate = project(batch, config, projection)
    shape = (config.n_channels, *map_shape(config))
    rng = np.random.default_rng(config.seed) if config.assignment == "random" else None
    scores, ids = _assign(keys, batch.scores, batch.det_ids, shape, config.assignment, rng)
    return ScoreMapStack(scores, ids, config.scales, config.ratios, n_degenerate)


def write_stack_trace(stack: ScoreMapStack, path) -> None:
    """Dump a stack as text: a JSON header line, then one slab per channel.

    Each slab starts with ``# channel <c> scale <s> ratio <r>`` and holds
    ``map_h`` rows of ``map_w`` space-separated ``score:det_id`` tokens, with
    ``0:-1`` for empty cells.
    """
    C, H, W = stack.shape
    header = {"channels": C, "map_h": H, "map_w": W, "scales": list(stack.scales), "ratios": list(stack.ratios)}
    lines = [json.dumps(header, sort_keys=True)]
    for c in range(C):
        s, r = stack.channel_meta(c)
        lines.append(f"# channel {c} scale {s!r} ratio {r!r}")
        for y in range(H):
            lines.append(" ".join(
                f"{float(stack.scores[c, y, x])!r}:{int(stack.det_ids[c, y, x])}" for x in range(W)
            ))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_stack_trace(path) -> ScoreMapStack:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        C, H, W = header["channels"], header["map_h"], header["map_w"]
        scores = np.zeros((C, H, W))
        ids = np.full((C, H, W), EMPTY, dtype=np.int64)
        for c in range(C):
            fh.readline()
            for y in range(H):
                for x, token in enumerate(fh.readline().split()):
                    s, d = token.split(":")
                    scores[c, y, x] = float(s)
                    ids[c, y, x] = int(d)
    return ScoreMapStack(scores, ids, tuple(header["scales"]), tuple(header["ratios"]))


def nearest_channel_box(box_w: float, box_h: float, config: NmsConfig) -> tuple[int, float, float]:
    """Channel nearest to a box shape and that channel's default ``(w, h)``."""
    c = channel_recover(box_w, box_h, config.scales, config.ratios, config.log_space_channels)
    scale = config.scales[c // len(config.ratios)]
    ratio = config.ratios[c % len(config.ratios)]
    return c, math.sqrt(scale / ratio), math.sqrt(scale * ratio)
